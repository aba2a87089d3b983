use std::path::Path;

use serde::{Deserialize, Serialize};

use super::condition::{ConditionEmbedding, ConditionInput, ConditionSource};
use super::{p_sample_loop, time_embedding, NoisePredictor, NoiseSchedule};
use crate::field::meta_field;
use crate::gs_model::GaussianSplat;
use crate::numeric::{Activation, Bound, Checkpoint, FinalInit, Linear, Mlp, ParamId, ParamStore, SetEncoder, Tape, Tensor, Var};
use crate::vae::{encoder_rows, EncoderInput, EncoderMode};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    /// Width E of condition embeddings.
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Input width E′ of external condition files; no projector when unset.
    pub file_dim: Option<usize>,
    /// Width of the partial-splat encoder.
    pub partial_width: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            cond_dim: 64,
            time_dim: 32,
            hidden: 256,
            layers: 3,
            file_dim: None,
            partial_width: 128,
            seed: 0,
        }
    }
}

/// MLP over `[z_t, time embedding, condition]` predicting the noise, plus
/// the condition encoders: a learned null token, an optional linear
/// projector for external vectors, and a set encoder for partial splats.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    pub net: Mlp,
    pub null: ParamId,
    pub projector: Option<Linear>,
    pub partial: SetEncoder,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        if config.latent_dim == 0 || config.cond_dim == 0 || config.hidden == 0 || config.layers == 0 {
            return Err(Error::Invalid("denoiser widths and depth must be positive".into()));
        }
        if config.time_dim < 2 || config.time_dim % 2 != 0 {
            return Err(Error::Invalid(format!("time_dim must be even and >= 2, got {}", config.time_dim)));
        }
        if config.file_dim == Some(0) {
            return Err(Error::Invalid("file_dim must be positive".into()));
        }
        let mut r = rng::rng(rng::derive_seed(config.seed, "denoiser_init"));
        let mut store = ParamStore::new();
        let mut dims = vec![config.latent_dim + config.time_dim + config.cond_dim];
        dims.extend(std::iter::repeat_n(config.hidden, config.layers));
        dims.push(config.latent_dim);
        let net = Mlp::new(&mut store, "net", &dims, Activation::Relu, FinalInit::Zero, &mut r);
        let null = store.add("null", Tensor::zeros(&[1, config.cond_dim]));
        let projector = config
            .file_dim
            .map(|e| Linear::new(&mut store, "proj", e, config.cond_dim, 1.0, &mut r));
        let partial = SetEncoder::new(
            &mut store,
            "partial",
            EncoderMode::Attributes.input_dim(),
            config.partial_width,
            config.cond_dim,
            FinalInit::He,
            &mut r,
        );
        Ok(Self {
            config,
            store,
            net,
            null,
            projector,
            partial,
        })
    }

    /// Projects an external vector to the condition width.
    pub fn project_file(&self, v: &[f64]) -> Result<ConditionEmbedding> {
        let p = self
            .projector
            .as_ref()
            .ok_or_else(|| Error::Invalid("model was built without a condition-file projector".into()))?;
        if v.len() != p.fan_in {
            return Err(Error::Data(format!(
                "condition vector has {} values, projector expects {}",
                v.len(),
                p.fan_in
            )));
        }
        let out = p.eval(&self.store, &Tensor::row(v.to_vec()))?;
        Ok(ConditionEmbedding {
            vector: Some(out.into_data()),
            source: ConditionSource::File,
        })
    }

    /// Permutation-invariant embedding of a partial splat.
    pub fn embed_partial(&self, partial: &GaussianSplat) -> Result<ConditionEmbedding> {
        let rows = encoder_rows(EncoderInput::Splat(partial), EncoderMode::Attributes)?;
        let n = partial.count();
        let x = Tensor::new(&[n, EncoderMode::Attributes.input_dim()], rows)?;
        let out = self.partial.eval(&self.store, &x, &[0, n])?;
        Ok(ConditionEmbedding {
            vector: Some(out.into_data()),
            source: ConditionSource::PartialSplat,
        })
    }

    pub fn embed(&self, input: &ConditionInput) -> Result<ConditionEmbedding> {
        match input {
            ConditionInput::Null => Ok(ConditionEmbedding::null()),
            ConditionInput::File(v) => self.project_file(v),
            ConditionInput::Partial(s) => self.embed_partial(s),
        }
    }

    fn time_rows(&self, ts: &[usize]) -> Result<Tensor> {
        let k = self.config.time_dim;
        Tensor::new(&[ts.len(), k], ts.iter().flat_map(|t| time_embedding(*t, k)).collect())
    }

    /// Condition rows on a tape, in the order of `conds`.
    fn cond_vars(&self, tape: &mut Tape, bound: &Bound, conds: &[&ConditionInput]) -> Result<Var> {
        let mut groups: [Vec<usize>; 3] = Default::default();
        for (i, c) in conds.iter().enumerate() {
            let g = match c {
                ConditionInput::Null => 0,
                ConditionInput::File(_) => 1,
                ConditionInput::Partial(_) => 2,
            };
            groups[g].push(i);
        }
        let mut parts = Vec::new();
        if !groups[0].is_empty() {
            let null = bound.var(self.null);
            parts.push(tape.gather_rows(null, &vec![0; groups[0].len()])?);
        }
        if !groups[1].is_empty() {
            let p = self
                .projector
                .as_ref()
                .ok_or_else(|| Error::Invalid("model was built without a condition-file projector".into()))?;
            let mut data = Vec::with_capacity(groups[1].len() * p.fan_in);
            for &i in &groups[1] {
                let ConditionInput::File(v) = conds[i] else { unreachable!() };
                if v.len() != p.fan_in {
                    return Err(Error::Data(format!(
                        "condition vector has {} values, projector expects {}",
                        v.len(),
                        p.fan_in
                    )));
                }
                data.extend_from_slice(v);
            }
            let x = tape.constant(Tensor::new(&[groups[1].len(), p.fan_in], data)?);
            parts.push(p.forward(tape, bound, x)?);
        }
        if !groups[2].is_empty() {
            let k = EncoderMode::Attributes.input_dim();
            let mut data = Vec::new();
            let mut offsets = vec![0];
            for &i in &groups[2] {
                let ConditionInput::Partial(s) = conds[i] else { unreachable!() };
                data.extend(encoder_rows(EncoderInput::Splat(s), EncoderMode::Attributes)?);
                offsets.push(data.len() / k);
            }
            let x = tape.constant(Tensor::new(&[data.len() / k, k], data)?);
            parts.push(self.partial.forward(tape, bound, x, &offsets)?);
        }
        let stacked = tape.concat(&parts, 0)?;
        let mut pos = vec![0; conds.len()];
        for (row, i) in groups.iter().flatten().enumerate() {
            pos[*i] = row;
        }
        tape.gather_rows(stacked, &pos)
    }

    /// Predicted noise for a batch, built on a tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z_t: Tensor,
        ts: &[usize],
        conds: &[&ConditionInput],
    ) -> Result<Var> {
        let b = ts.len();
        if z_t.shape() != [b, self.config.latent_dim] || conds.len() != b {
            return Err(Error::shape("denoiser", z_t.shape(), &[b, self.config.latent_dim]));
        }
        let z = tape.constant(z_t);
        let te = tape.constant(self.time_rows(ts)?);
        let c = self.cond_vars(tape, bound, conds)?;
        let x = tape.concat(&[z, te, c], 1)?;
        self.net.forward(tape, bound, x)
    }
}

impl NoisePredictor for Denoiser {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn predict(&self, z_t: &[f64], t: usize, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        let (d, e) = (self.config.latent_dim, self.config.cond_dim);
        if z_t.len() != d {
            return Err(Error::shape("denoiser", &[z_t.len()], &[d]));
        }
        let c = match &cond.vector {
            Some(v) if v.len() != e => return Err(Error::shape("condition", &[v.len()], &[e])),
            Some(v) => v.as_slice(),
            None => self.store.get(self.null).data(),
        };
        let mut x = Vec::with_capacity(d + self.config.time_dim + e);
        x.extend_from_slice(z_t);
        x.extend(time_embedding(t, self.config.time_dim));
        x.extend_from_slice(c);
        Ok(self.net.eval(&self.store, &Tensor::row(x))?.into_data())
    }
}

/// Trained denoiser with its schedule and the factor applied to latents
/// before diffusion.
#[derive(Clone, Debug)]
pub struct Ldm {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub latent_scale: f64,
}

impl Ldm {
    /// Draws one latent in the VAE's units.
    pub fn sample(&self, cond: &ConditionEmbedding, seed: u64, guidance: f64) -> Result<Vec<f64>> {
        let z = p_sample_loop(&self.denoiser, cond, &self.schedule, seed, guidance)?;
        Ok(z.into_iter().map(|v| v / self.latent_scale).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "ldm",
            "config": self.denoiser.config,
            "schedule_steps": self.schedule.steps(),
            "latent_scale": self.latent_scale,
        }));
        ck.push_store("denoiser", &self.denoiser.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "ldm" {
            return Err(Error::Format(format!("expected an ldm checkpoint, found kind {}", ck.meta["kind"])));
        }
        let mut denoiser = Denoiser::new(meta_field(ck, "config")?)?;
        ck.fill_store("denoiser", &mut denoiser.store)?;
        let latent_scale: f64 = meta_field(ck, "latent_scale")?;
        if !(latent_scale.is_finite() && latent_scale > 0.0) {
            return Err(Error::Format(format!("invalid latent scale {latent_scale}")));
        }
        Ok(Self {
            denoiser,
            schedule: NoiseSchedule::new(meta_field(ck, "schedule_steps")?)?,
            latent_scale,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gs_model::Gaussian;
    use crate::numeric::Tape;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            latent_dim: 6,
            cond_dim: 5,
            time_dim: 8,
            hidden: 16,
            layers: 2,
            file_dim: Some(3),
            partial_width: 8,
            seed: 1,
        }
    }

    fn chunk(seed: u64) -> GaussianSplat {
        let mut r = rng::rng(seed);
        GaussianSplat::new(
            (0..12)
                .map(|_| Gaussian {
                    center: std::array::from_fn(|_| r.random_range(-0.5..0.5)),
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    scale: [0.004; 3],
                    opacity: r.random_range(0.0..1.0),
                    color: [0.2, 0.4, 0.6],
                })
                .collect(),
        )
    }

    #[test]
    fn zero_file_gives_projector_bias() {
        let mut m = Denoiser::new(small()).unwrap();
        let b = m.projector.unwrap().bias;
        m.store.get_mut(b).data_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let e = m.project_file(&[0.0; 3]).unwrap();
        assert_eq!(e.vector.unwrap(), vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(e.source, ConditionSource::File);
        assert!(m.project_file(&[0.0; 4]).is_err());
        let none = Denoiser::new(DenoiserConfig { file_dim: None, ..small() }).unwrap();
        assert!(none.project_file(&[0.0; 3]).is_err());
    }

    #[test]
    fn partial_embedding_is_permutation_invariant() {
        let m = Denoiser::new(small()).unwrap();
        let s = chunk(2);
        let mut p = s.clone();
        p.gaussians.shuffle(&mut rng::rng(3));
        let a = m.embed_partial(&s).unwrap();
        assert_eq!(a.vector.as_ref().unwrap().len(), 5);
        assert_eq!(a, m.embed_partial(&p).unwrap());
        assert!(m.embed_partial(&GaussianSplat::new(vec![])).is_err());
    }

    #[test]
    fn tape_forward_matches_predict() {
        let m = Denoiser::new(small()).unwrap();
        // make the output layer non-zero so the comparison means something
        let mut m2 = m.clone();
        let last = m2.net.last().weight;
        m2.store.get_mut(last).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let conds = [
            ConditionInput::Partial(chunk(4)),
            ConditionInput::Null,
            ConditionInput::File(vec![0.5, -0.5, 1.0]),
            ConditionInput::Partial(chunk(5)),
        ];
        let refs: Vec<&ConditionInput> = conds.iter().collect();
        let z: Vec<f64> = (0..24).map(|i| (i as f64 * 0.1).cos()).collect();
        let ts = [0, 5, 17, 99];
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&m2.store);
        let out = m2
            .forward(&mut tape, &bound, Tensor::new(&[4, 6], z.clone()).unwrap(), &ts, &refs)
            .unwrap();
        let out = tape.value(out).clone();
        for i in 0..4 {
            let e = m2.embed(&conds[i]).unwrap();
            let p = m2.predict(&z[i * 6..(i + 1) * 6], ts[i], &e).unwrap();
            for (a, b) in p.iter().zip(out.row_slice(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // fresh model predicts zero noise
        assert!(m.predict(&[0.3; 6], 2, &ConditionEmbedding::null()).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let ldm = Ldm {
            denoiser: Denoiser::new(small()).unwrap(),
            schedule: NoiseSchedule::new(20).unwrap(),
            latent_scale: 2.5,
        };
        let back = Ldm::from_checkpoint(&Checkpoint::from_bytes(&ldm.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.schedule, ldm.schedule);
        let c = ConditionEmbedding::null();
        assert_eq!(ldm.sample(&c, 4, 1.0).unwrap(), back.sample(&c, 4, 1.0).unwrap());
    }
}
