//! Ground-truth probability, color and transform functions of a fitted splat.
//!
//! The probability of a query is a truncated, mapped distance to the nearest
//! Gaussian center; color and transform at a query are the attributes of the
//! nearest Gaussian (exact at centers, piecewise constant elsewhere).

mod kdtree;
mod samples;

pub use kdtree::{nearest_linear, KdTree};
pub use samples::{sample_training_queries, FieldSampleSet, SamplingConfig};

use serde::{Deserialize, Serialize};

use crate::field_api::GaussianField;
use crate::gs_model::{Attributes, GaussianSplat};
use crate::math::{self, Vec3};
use crate::{Error, Result};

/// Distance-to-probability map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mapping {
    /// `1 - min(d, d_trunc) / d_trunc`
    #[default]
    Linear,
    /// `exp(-d / d_trunc)`
    Exponent,
}

impl std::str::FromStr for Mapping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "exponent" => Ok(Self::Exponent),
            _ => Err(Error::Invalid(format!("unknown mapping '{s}' (linear|exponent)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationConfig {
    pub d_trunc: f64,
    pub mapping: Mapping,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            d_trunc: 0.05,
            mapping: Mapping::Linear,
        }
    }
}

impl TruncationConfig {
    pub fn new(d_trunc: f64, mapping: Mapping) -> Result<Self> {
        if !(d_trunc > 0.0) {
            return Err(Error::Invalid(format!("d_trunc must be > 0, got {d_trunc}")));
        }
        Ok(Self { d_trunc, mapping })
    }

    /// Probability for a center distance `d`.
    pub fn probability(&self, d: f64) -> f64 {
        match self.mapping {
            Mapping::Linear => 1.0 - d.min(self.d_trunc) / self.d_trunc,
            Mapping::Exponent => (-d / self.d_trunc).exp(),
        }
    }

    /// Derivative of [`probability`](Self::probability) with respect to `d`.
    pub fn probability_slope(&self, d: f64) -> f64 {
        match self.mapping {
            Mapping::Linear if d < self.d_trunc => -1.0 / self.d_trunc,
            Mapping::Linear => 0.0,
            Mapping::Exponent => -(-d / self.d_trunc).exp() / self.d_trunc,
        }
    }
}

/// Exact nearest-center index over a splat.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    tree: KdTree,
}

impl SpatialIndex {
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        let (i, d2) = self.tree.nearest(q).expect("index is never empty");
        (i, d2.sqrt())
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn centers(&self) -> &[Vec3] {
        self.tree.points()
    }

    /// Nearest center if it lies closer than `radius`.
    pub fn nearest_within(&self, q: Vec3, radius: f64) -> Option<(usize, f64)> {
        self.tree.nearest_within(q, radius * radius).map(|(i, d2)| (i, d2.sqrt()))
    }
}

pub fn build_index(splat: &GaussianSplat) -> Result<SpatialIndex> {
    if splat.is_empty() {
        return Err(Error::Invalid("cannot index an empty splat".into()));
    }
    Ok(SpatialIndex {
        tree: KdTree::new(splat.centers()),
    })
}

/// Ground-truth probability of `q`.
pub fn gaupf_gt(index: &SpatialIndex, q: Vec3, cfg: &TruncationConfig) -> f64 {
    cfg.probability(index.nearest(q).1)
}

/// Attributes of the Gaussian nearest to `q` (lowest index on ties).
pub fn attr_gt(index: &SpatialIndex, splat: &GaussianSplat, q: Vec3) -> Attributes {
    splat.gaussians[index.nearest(q).0].attributes()
}

/// The ground-truth functions packaged as a field, used as an oracle
/// stand-in for a learned field.
#[derive(Clone, Debug)]
pub struct GroundTruthField {
    pub splat: GaussianSplat,
    pub index: SpatialIndex,
    pub cfg: TruncationConfig,
}

impl GroundTruthField {
    pub fn new(splat: GaussianSplat, cfg: TruncationConfig) -> Result<Self> {
        let index = build_index(&splat)?;
        Ok(Self { splat, index, cfg })
    }
}

impl GroundTruthField {
    /// Nearest center, or `None` when the linear mapping is exactly zero
    /// there anyway.
    fn lookup(&self, q: Vec3) -> Option<(usize, f64)> {
        match self.cfg.mapping {
            Mapping::Linear => self.index.nearest_within(q, self.cfg.d_trunc),
            Mapping::Exponent => Some(self.index.nearest(q)),
        }
    }
}

impl GaussianField for GroundTruthField {
    fn probability(&self, points: &[Vec3]) -> Vec<f64> {
        points
            .iter()
            .map(|q| self.lookup(*q).map_or(0.0, |(_, d)| self.cfg.probability(d)))
            .collect()
    }

    fn probability_and_gradient(&self, points: &[Vec3]) -> Vec<(f64, Vec3)> {
        points
            .iter()
            .map(|&q| {
                let Some((i, d)) = self.lookup(q) else {
                    return (0.0, [0.0; 3]);
                };
                let p = self.cfg.probability(d);
                if d == 0.0 {
                    return (p, [0.0; 3]);
                }
                let dir = math::scale(math::sub(q, self.index.centers()[i]), 1.0 / d);
                (p, math::scale(dir, self.cfg.probability_slope(d)))
            })
            .collect()
    }

    fn attributes(&self, points: &[Vec3]) -> Vec<Attributes> {
        points
            .iter()
            .map(|q| attr_gt(&self.index, &self.splat, *q))
            .collect()
    }
}
