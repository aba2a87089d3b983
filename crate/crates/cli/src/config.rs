use std::path::Path;

use gsfield_core::diffusion::{DenoiserConfig, LdmTrainConfig};
use gsfield_core::extraction::ExtractConfig;
use gsfield_core::field::FitConfig;
use gsfield_core::gs_model::SCALE_CLIP;
use gsfield_core::gt_functions::SamplingConfig;
use gsfield_core::vae::VaeConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every tunable of the pipeline. Stage seeds inside the sections are
/// replaced by seeds derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scale_clip: f64,
    pub sampling: SamplingConfig,
    pub fit: FitConfig,
    pub vae: VaeConfig,
    pub ldm: LdmSection,
    pub extract: ExtractConfig,
    pub metrics: MetricsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale_clip: SCALE_CLIP,
            sampling: SamplingConfig::default(),
            fit: FitConfig::default(),
            vae: VaeConfig::default(),
            ldm: LdmSection::default(),
            extract: ExtractConfig::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmSection {
    pub model: DenoiserConfig,
    pub train: LdmTrainConfig,
    /// Classifier-free guidance scale at sampling; 1 disables guidance.
    pub guidance: f64,
    /// Partial chunks drawn per shape when training a completion model.
    pub partials_per_shape: usize,
}

impl Default for LdmSection {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            train: LdmTrainConfig::default(),
            guidance: 1.0,
            partials_per_shape: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub n_queries: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { n_queries: 20_000 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unserializable config: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = PipelineConfig::default();
        let back: PipelineConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<PipelineConfig>("[extract.octree]\nmax_depht = 3").is_err());
        let p: PipelineConfig = toml::from_str("seed = 4\n[extract]\ncount = 10").unwrap();
        assert_eq!((p.seed, p.extract.count, p.extract.octree.max_depth), (4, 10, 8));
    }
}
