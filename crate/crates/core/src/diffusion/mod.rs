//! DDPM over latent codes: noise schedule, forward noising, the
//! noise-prediction objective, ancestral sampling and conditioning.

mod condition;
mod denoiser;
mod partial;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

pub use condition::{load_condition_file, save_condition_file, ConditionEmbedding, ConditionInput, ConditionSource};
pub use denoiser::{Denoiser, DenoiserConfig, Ldm};
pub use partial::{make_partial, partition_octants};
pub use train::{train_ldm, LatentScale, LdmTrainConfig, LdmExample, TrainedLdm};

/// Linear beta schedule with cumulative products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END_1000: f64 = 0.02;

impl NoiseSchedule {
    /// Linear betas from 1e-4 to 0.02·1000/T (capped below 1), so the total
    /// noise injected matches the 1000-step reference schedule.
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        let end = (BETA_END_1000 * 1000.0 / steps as f64).min(0.999);
        Self::linear(steps, BETA_START.min(end), end)
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Invalid(format!("timestep {t} out of range 0..{}", self.steps())));
        }
        Ok(())
    }

    /// Variance of q(z_{t-1} | z_t, z_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t]
    }
}

/// √ᾱₜ·z0 + √(1−ᾱₜ)·eps.
pub fn q_sample(z0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if z0.len() != eps.len() {
        return Err(Error::shape("q_sample", &[z0.len()], &[eps.len()]));
    }
    let a = sched.alpha_bars[t];
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| sa * z + sn * e).collect())
}

/// Sinusoidal embedding of a timestep: sines then cosines over geometric
/// frequencies 1 … 1/10000.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

/// Anything that predicts the injected noise.
pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;
    fn predict(&self, z_t: &[f64], t: usize, cond: &ConditionEmbedding) -> Result<Vec<f64>>;
}

/// ‖ε − ε̂(z_t, t, y)‖² for one draw of t ~ U{0..T−1} and ε ~ N(0, I).
pub fn ldm_loss(
    model: &dyn NoisePredictor,
    z0: &[f64],
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if z0.len() != model.latent_dim() {
        return Err(Error::shape("ldm_loss", &[z0.len()], &[model.latent_dim()]));
    }
    let mut r = rng::rng(seed);
    let t = r.random_range(0..sched.steps());
    let eps: Vec<f64> = (0..z0.len()).map(|_| r.sample(StandardNormal)).collect();
    let zt = q_sample(z0, t, &eps, sched)?;
    let pred = model.predict(&zt, t, cond)?;
    Ok(eps.iter().zip(&pred).map(|(e, p)| (e - p) * (e - p)).sum())
}

/// Ancestral sampling from z_T ~ N(0, I). With `guidance` ≠ 1 and a
/// non-null condition the noise estimate is ε̂(∅) + g·(ε̂(y) − ε̂(∅)).
pub fn p_sample_loop(
    model: &dyn NoisePredictor,
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
    seed: u64,
    guidance: f64,
) -> Result<Vec<f64>> {
    let d = model.latent_dim();
    let mut r = rng::rng(seed);
    let mut z: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let guided = guidance != 1.0 && !cond.is_null();
    let null = ConditionEmbedding::null();
    for t in (0..sched.steps()).rev() {
        let mut eps = model.predict(&z, t, cond)?;
        if guided {
            let u = model.predict(&z, t, &null)?;
            for (e, u) in eps.iter_mut().zip(&u) {
                *e = u + guidance * (*e - u);
            }
        }
        let (a, ab, b) = (sched.alphas[t], sched.alpha_bars[t], sched.betas[t]);
        let k = b / (1.0 - ab).sqrt();
        let sigma = sched.posterior_variance(t).sqrt();
        for (zi, e) in z.iter_mut().zip(&eps) {
            *zi = (*zi - k * e) / a.sqrt();
            if t > 0 {
                *zi += sigma * r.sample::<f64, _>(StandardNormal);
            }
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "sampling produced a non-finite value at step {t} (coordinate {i})"
            )));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero(usize);
    impl NoisePredictor for Zero {
        fn latent_dim(&self) -> usize {
            self.0
        }
        fn predict(&self, _: &[f64], _: usize, _: &ConditionEmbedding) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.0])
        }
    }

    /// Knows z0 and therefore recovers the exact noise.
    struct Oracle {
        z0: Vec<f64>,
        sched: NoiseSchedule,
    }
    impl NoisePredictor for Oracle {
        fn latent_dim(&self) -> usize {
            self.z0.len()
        }
        fn predict(&self, zt: &[f64], t: usize, _: &ConditionEmbedding) -> Result<Vec<f64>> {
            let a = self.sched.alpha_bars[t];
            Ok(zt.iter().zip(&self.z0).map(|(z, z0)| (z - a.sqrt() * z0) / (1.0 - a).sqrt()).collect())
        }
    }

    #[test]
    fn schedule_invariants() {
        for steps in [1, 2, 10, 100, 1000] {
            let s = NoiseSchedule::new(steps).unwrap();
            assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
            assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            assert!(*s.alpha_bars.last().unwrap() < 0.05, "T={steps}");
        }
        let s = NoiseSchedule::new(100).unwrap();
        assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-12);
        assert!(NoiseSchedule::new(0).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule::new(100).unwrap();
        let z0 = [1.0, -2.0, 0.5];
        let out = q_sample(&z0, 40, &[0.0; 3], &s).unwrap();
        for (o, z) in out.iter().zip(z0) {
            assert_eq!(*o, s.alpha_bars[40].sqrt() * z);
        }
        let eps = [0.3, 0.1, -0.7];
        let out = q_sample(&z0, 0, &eps, &s).unwrap();
        let dev = crate::math::norm([out[0] - z0[0], out[1] - z0[1], out[2] - z0[2]]);
        assert!(dev < 0.02 * crate::math::norm(eps) + 1e-2 * crate::math::norm(z0));
        assert!(q_sample(&z0, 100, &eps, &s).is_err());
        assert!(q_sample(&z0, 0, &[0.0; 2], &s).is_err());
    }

    #[test]
    fn q_sample_variance_matches_closed_form() {
        let s = NoiseSchedule::new(100).unwrap();
        let mut r = rng::rng(5);
        let n = 100_000;
        for t in [0, 30, 99] {
            // z0 ~ N(0.5, 0.4²) per draw
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    let z0 = 0.5 + 0.4 * r.sample::<f64, _>(StandardNormal);
                    let e: f64 = r.sample(StandardNormal);
                    q_sample(&[z0], t, &[e], &s).unwrap()[0]
                })
                .collect();
            let a = s.alpha_bars[t];
            let var = a * 0.16 + (1.0 - a);
            let mean = xs.iter().sum::<f64>() / n as f64;
            let emp = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Var of the sample variance for a Gaussian is 2σ⁴/(n−1).
            let se = (2.0 * var * var / (n - 1) as f64).sqrt();
            assert!((emp - var).abs() < 3.0 * se, "t={t}: {emp} vs {var}");
            let mse = (var / n as f64).sqrt();
            assert!((mean - a.sqrt() * 0.5).abs() < 3.0 * mse);
        }
    }

    #[test]
    fn ldm_loss_oracle_and_zero() {
        let s = NoiseSchedule::new(100).unwrap();
        let z0 = vec![0.2; 8];
        let oracle = Oracle {
            z0: z0.clone(),
            sched: s.clone(),
        };
        let c = ConditionEmbedding::null();
        assert!(ldm_loss(&oracle, &z0, &c, &s, 3).unwrap() < 1e-20);
        let n = 10_000;
        let mean = (0..n).map(|i| ldm_loss(&Zero(8), &z0, &c, &s, i).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 8.0).abs() < 0.05 * 8.0, "{mean}");
        assert_eq!(ldm_loss(&Zero(8), &z0, &c, &s, 9).unwrap(), ldm_loss(&Zero(8), &z0, &c, &s, 9).unwrap());
        assert!(ldm_loss(&Zero(8), &[0.0; 3], &c, &s, 9).is_err());
    }

    #[test]
    fn zero_predictor_samples_are_centered() {
        let s = NoiseSchedule::new(100).unwrap();
        // With ε̂ ≡ 0 the update is linear: z ← z/√αₜ + σₜ·ξ, so the final
        // variance follows v ← v/αₜ + σₜ² from v = 1.
        let mut v = 1.0;
        for t in (0..100).rev() {
            v = v / s.alphas[t] + s.posterior_variance(t);
        }
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|i| p_sample_loop(&Zero(1), &ConditionEmbedding::null(), &s, i, 1.0).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * (v / n as f64).sqrt(), "{mean}");
        let emp = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((emp / v - 1.0).abs() < 0.05, "{emp} vs {v}");
        assert_eq!(
            p_sample_loop(&Zero(4), &ConditionEmbedding::null(), &s, 7, 1.0).unwrap(),
            p_sample_loop(&Zero(4), &ConditionEmbedding::null(), &s, 7, 1.0).unwrap()
        );
    }

    #[test]
    fn time_embedding_shape() {
        let e = time_embedding(0, 32);
        assert_eq!(e.len(), 32);
        assert!(e[..16].iter().all(|v| *v == 0.0) && e[16..].iter().all(|v| *v == 1.0));
        assert_ne!(time_embedding(3, 32), time_embedding(4, 32));
    }
}
