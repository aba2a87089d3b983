//! Set encoder to a Gaussian latent, MLP decoder to a triplane, and the
//! shared field heads.

mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::field::{meta_field, FieldHeads, HeadConfig, LossWeights, NeuralField, Triplane, TriplaneShape};
use crate::gs_model::{GaussianSplat, GAUSSIAN_DIM, SCALE_CLIP};
use crate::gt_functions::{FieldSampleSet, SamplingConfig};
use crate::math::Vec3;
use crate::numeric::{Activation, Checkpoint, FinalInit, Mlp, ParamStore, SetEncoder, Tensor};
use crate::{rng, Error, Result};

pub use train::{train_vae, TrainedVae, VaeExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Full 14-value Gaussians.
    Attributes,
    /// Bare centers.
    Points,
}

impl EncoderMode {
    pub fn input_dim(self) -> usize {
        match self {
            EncoderMode::Attributes => GAUSSIAN_DIM,
            EncoderMode::Points => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::Attributes => "attributes",
            EncoderMode::Points => "points",
        }
    }
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attributes" => Ok(EncoderMode::Attributes),
            "points" => Ok(EncoderMode::Points),
            _ => Err(Error::Invalid(format!("unknown encoder mode `{s}` (attributes|points)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub mode: EncoderMode,
    pub latent_dim: usize,
    pub encoder_width: usize,
    pub decoder_hidden: usize,
    pub triplane: TriplaneShape,
    pub heads: HeadConfig,
    /// Gain of the decoder's output layer; 0 gives all-zero planes.
    pub decoder_init: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Shapes per step.
    pub batch_shapes: usize,
    /// Labelled queries drawn from each shape per step.
    pub queries_per_shape: usize,
    pub weights: LossWeights,
    pub cosine_decay: bool,
    /// Redraw each shape's queries at the start of every epoch after the first.
    pub resample: Option<SamplingConfig>,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Attributes,
            latent_dim: 64,
            encoder_width: 256,
            decoder_hidden: 256,
            triplane: TriplaneShape::default(),
            heads: HeadConfig::default(),
            decoder_init: 0.1,
            beta: 1e-4,
            lr: 1e-4,
            epochs: 100,
            steps_per_epoch: 50,
            batch_shapes: 8,
            queries_per_shape: 256,
            weights: LossWeights::default(),
            cosine_decay: false,
            resample: None,
            seed: 0,
        }
    }
}

/// Posterior parameters and one reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
    pub eps: Vec<f64>,
    pub sample: Vec<f64>,
}

impl LatentCode {
    pub fn from_posterior(mean: Vec<f64>, log_variance: Vec<f64>, r: &mut impl Rng) -> Self {
        let eps: Vec<f64> = (0..mean.len()).map(|_| r.sample(StandardNormal)).collect();
        let sample = mean
            .iter()
            .zip(&log_variance)
            .zip(&eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Self {
            mean,
            log_variance,
            eps,
            sample,
        }
    }
}

/// KL(N(mean, diag exp(log_var)) ‖ N(0, I)).
pub fn kl_divergence(mean: &[f64], log_var: &[f64]) -> f64 {
    -0.5 * mean
        .iter()
        .zip(log_var)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Joint L1 over labelled attributes plus β·KL, evaluated without a tape.
/// `pred` holds predictions for the same queries as `gt`.
pub fn vae_loss(pred: &FieldSampleSet, gt: &FieldSampleSet, latent: &LatentCode, beta: f64, scale_clip: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("vae_loss", &[pred.len()], &[gt.len()]));
    }
    let n = gt.len().max(1) as f64;
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let mut groups = [0.0; 5];
    for i in 0..gt.len() {
        let (p, g) = (&pred.attr_labels[i], &gt.attr_labels[i]);
        groups[0] += (pred.prob_labels[i] - gt.prob_labels[i]).abs();
        groups[1] += l1(&p.color, &g.color);
        let s = if crate::math::quat_dot(p.rotation, g.rotation) < 0.0 { -1.0 } else { 1.0 };
        groups[2] += l1(&p.rotation.map(|v| v * s), &g.rotation);
        groups[3] += l1(&p.scale.map(|v| v / scale_clip), &g.scale.map(|v| v / scale_clip));
        groups[4] += (p.opacity - g.opacity).abs();
    }
    Ok(groups.iter().sum::<f64>() / n + beta * kl_divergence(&latent.mean, &latent.log_variance))
}

/// Input to the encoder.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Splat(&'a GaussianSplat),
    Points(&'a [Vec3]),
}

/// Encoder rows for one input: centers, canonical-sign quaternion, scale in
/// units of the clip bound, opacity and color.
pub fn encoder_rows(input: EncoderInput, mode: EncoderMode) -> Result<Vec<f64>> {
    let rows: Vec<f64> = match (input, mode) {
        (EncoderInput::Splat(s), EncoderMode::Attributes) => s
            .gaussians
            .iter()
            .flat_map(|g| {
                let mut a = g.to_array();
                if a[3] < 0.0 {
                    a[3..7].iter_mut().for_each(|v| *v = -*v);
                }
                a[7..10].iter_mut().for_each(|v| *v /= SCALE_CLIP);
                a
            })
            .collect(),
        (EncoderInput::Splat(s), EncoderMode::Points) => s.gaussians.iter().flat_map(|g| g.center).collect(),
        (EncoderInput::Points(p), EncoderMode::Points) => p.iter().flatten().copied().collect(),
        (EncoderInput::Points(_), EncoderMode::Attributes) => {
            return Err(Error::Invalid(
                "encoder in attributes mode needs 14-value Gaussians, got bare 3-D points".into(),
            ))
        }
    };
    if rows.is_empty() {
        return Err(Error::Invalid(format!("{} encoder needs at least one input element", mode.name())));
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct GaussianVae {
    pub config: VaeConfig,
    /// Encoder and decoder weights.
    pub store: ParamStore,
    pub encoder: SetEncoder,
    pub decoder: Mlp,
    pub heads: FieldHeads,
}

impl GaussianVae {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.triplane.validate()?;
        if config.latent_dim == 0 || config.encoder_width == 0 || config.decoder_hidden == 0 {
            return Err(Error::Invalid("latent and layer widths must be positive".into()));
        }
        let mut r = rng::rng(rng::derive_seed(config.seed, "vae_init"));
        let mut store = ParamStore::new();
        let encoder = SetEncoder::new(
            &mut store,
            "enc",
            config.mode.input_dim(),
            config.encoder_width,
            2 * config.latent_dim,
            FinalInit::Scaled(0.1),
            &mut r,
        );
        let last = if config.decoder_init == 0.0 {
            FinalInit::Zero
        } else {
            FinalInit::Scaled(config.decoder_init)
        };
        let decoder = Mlp::new(
            &mut store,
            "dec",
            &[config.latent_dim, config.decoder_hidden, config.triplane.len()],
            Activation::Relu,
            last,
            &mut r,
        );
        let heads = FieldHeads::new(config.triplane.feature_dim(), config.heads.clone(), &mut r)?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            heads,
        })
    }

    /// Posterior mean and log-variance for a batch of inputs.
    pub fn posterior(&self, inputs: &[EncoderInput]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let (rows, offsets) = self.stack(inputs)?;
        let out = self.encoder.eval(&self.store, &rows, &offsets)?;
        let d = self.config.latent_dim;
        Ok((0..inputs.len())
            .map(|i| {
                let r = out.row_slice(i);
                (r[..d].to_vec(), r[d..].to_vec())
            })
            .collect())
    }

    pub(crate) fn stack(&self, inputs: &[EncoderInput]) -> Result<(Tensor, Vec<usize>)> {
        let k = self.config.mode.input_dim();
        let mut data = Vec::new();
        let mut offsets = vec![0];
        for inp in inputs {
            data.extend(encoder_rows(*inp, self.config.mode)?);
            offsets.push(data.len() / k);
        }
        Ok((Tensor::new(&[data.len() / k, k], data)?, offsets))
    }

    pub fn encode(&self, input: EncoderInput, seed: u64) -> Result<LatentCode> {
        let (mean, lv) = self.posterior(&[input])?.remove(0);
        let mut r = rng::rng(rng::derive_seed(seed, "encode"));
        Ok(LatentCode::from_posterior(mean, lv, &mut r))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Triplane> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape("decode", &[z.len()], &[self.config.latent_dim]));
        }
        let planes = self.decoder.eval(&self.store, &Tensor::row(z.to_vec()))?;
        Triplane::new(self.config.triplane, planes)
    }

    /// Field decoded from a latent, sharing this model's heads.
    pub fn field(&self, z: &[f64]) -> Result<NeuralField> {
        NeuralField::new(self.decode(z)?, self.heads.clone())
    }

    /// Field decoded from the posterior mean of `input`.
    pub fn reconstruct(&self, input: EncoderInput) -> Result<NeuralField> {
        let (mean, _) = self.posterior(&[input])?.remove(0);
        self.field(&mean)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "vae",
            "config": self.config,
        }));
        ck.push_store("vae", &self.store);
        self.heads.write_checkpoint(&mut ck, "heads");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "vae" {
            return Err(Error::Format(format!("expected a vae checkpoint, found kind {}", ck.meta["kind"])));
        }
        let config: VaeConfig = meta_field(ck, "config")?;
        let mut vae = Self::new(config)?;
        ck.fill_store("vae", &mut vae.store)?;
        ck.fill_store("heads", &mut vae.heads.store)?;
        Ok(vae)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
