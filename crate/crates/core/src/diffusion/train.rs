use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::condition::ConditionInput;
use super::denoiser::{Denoiser, DenoiserConfig, Ldm};
use super::{q_sample, NoiseSchedule};
use crate::field::fit::cosine_factor;
use crate::numeric::{Adam, Tape, Tensor};
use crate::{rng, Error, Result};

/// A clean latent and the condition it was produced under.
#[derive(Clone, Debug, PartialEq)]
pub struct LdmExample {
    pub latent: Vec<f64>,
    pub cond: ConditionInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentScale {
    /// 1 / standard deviation over every latent coordinate.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule_steps: usize,
    /// Probability of replacing a condition by the null token.
    pub cond_dropout: f64,
    pub latent_scale: LatentScale,
    pub cosine_decay: bool,
    /// Steps between checkpoint writes; the final state is always written.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 64,
            lr: 1e-4,
            schedule_steps: 100,
            cond_dropout: 0.0,
            latent_scale: LatentScale::Auto,
            cosine_decay: false,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedLdm {
    pub ldm: Ldm,
    pub loss: Vec<f64>,
}

fn resolve_scale(data: &[LdmExample], s: LatentScale) -> Result<f64> {
    let scale = match s {
        LatentScale::Fixed(v) => v,
        LatentScale::Auto => {
            let n = data.iter().map(|d| d.latent.len()).sum::<usize>() as f64;
            let mean = data.iter().flat_map(|d| &d.latent).sum::<f64>() / n;
            let var = data.iter().flat_map(|d| &d.latent).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        }
    };
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Invalid(format!("latent scale must be positive and finite, got {scale}")));
    }
    Ok(scale)
}

/// Minimises the noise-prediction loss with Adam. Each step draws a batch
/// of examples, timesteps and noise from the seeded generator.
pub fn train_ldm(
    data: &[LdmExample],
    model: &DenoiserConfig,
    cfg: &LdmTrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainedLdm> {
    if data.is_empty() {
        return Err(Error::Invalid("train_ldm needs at least one latent".into()));
    }
    let d = model.latent_dim;
    if let Some(i) = data.iter().position(|x| x.latent.len() != d) {
        return Err(Error::shape("train_ldm latent", &[data[i].latent.len()], &[d]));
    }
    if cfg.batch == 0 {
        return Err(Error::Invalid("batch must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::Invalid(format!("cond_dropout must lie in [0, 1], got {}", cfg.cond_dropout)));
    }
    let schedule = NoiseSchedule::new(cfg.schedule_steps)?;
    let latent_scale = resolve_scale(data, cfg.latent_scale)?;
    let mut ldm = Ldm {
        denoiser: Denoiser::new(model.clone())?,
        schedule,
        latent_scale,
    };
    let mut r = rng::rng(rng::derive_seed(cfg.seed, "train_ldm"));
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let null = ConditionInput::Null;
    for step in 1..=cfg.steps {
        let mut zt = Vec::with_capacity(cfg.batch * d);
        let mut eps_all = Vec::with_capacity(cfg.batch * d);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut conds = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let ex = &data[r.random_range(0..data.len())];
            let t = r.random_range(0..ldm.schedule.steps());
            let eps: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let z0: Vec<f64> = ex.latent.iter().map(|v| v * latent_scale).collect();
            zt.extend(q_sample(&z0, t, &eps, &ldm.schedule)?);
            eps_all.extend(eps);
            ts.push(t);
            let drop = cfg.cond_dropout > 0.0 && r.random_bool(cfg.cond_dropout);
            conds.push(if drop { &null } else { &ex.cond });
        }
        let (grads, loss) = {
            let mut tape = Tape::new();
            let bound = tape.bind(&ldm.denoiser.store);
            let pred = ldm
                .denoiser
                .forward(&mut tape, &bound, Tensor::new(&[cfg.batch, d], zt)?, &ts, &conds)?;
            let target = tape.constant(Tensor::new(&[cfg.batch, d], eps_all)?);
            let mse = tape.mse_loss(pred, target)?;
            // squared norm per example, averaged over the batch
            let loss = tape.scale(mse, d as f64);
            let lv = tape.value(loss).item();
            let mut g = tape.backward(loss)?;
            (bound.grads(&mut g), lv)
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("train_ldm: loss became {loss} at step {step}")));
        }
        if cfg.cosine_decay {
            opt.lr = cfg.lr * cosine_factor(step, cfg.steps);
        }
        opt.step(&mut ldm.denoiser.store, &grads)?;
        losses.push(loss);
        if step % 500 == 0 {
            log::info!("train_ldm step {step}: loss {loss:.4}");
        }
        if let Some(path) = checkpoint {
            if step == cfg.steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                ldm.save(path)?;
            }
        }
    }
    Ok(TrainedLdm { ldm, loss: losses })
}
