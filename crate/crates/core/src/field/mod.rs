//! Triplane-conditioned neural fields: probability, color and transform
//! heads on top of bilinear triplane features.

pub mod fit;
pub mod triplane;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::field_api::GaussianField;
use crate::gs_model::{Attributes, SCALE_CLIP};
use crate::math::{sigmoid, Vec3};
use crate::numeric::nn::FinalInit;
use crate::numeric::{Activation, Bound, Checkpoint, Mlp, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

pub use fit::{fit_field, FitConfig, FitResult, LossWeights};
pub use triplane::{Triplane, TriplaneShape};

/// Rows evaluated per batch in the plain (tape-free) paths.
const EVAL_CHUNK: usize = 2048;

/// Width of the transform head output: quaternion, scale, opacity.
pub const TF_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub scale_clip: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            scale_clip: SCALE_CLIP,
        }
    }
}

/// The three predictor MLPs. Final layers start at zero, so a fresh model
/// predicts probability 0.5, identity rotation, half the scale bound and
/// mid-range color/opacity everywhere.
#[derive(Clone, Debug)]
pub struct FieldHeads {
    pub store: ParamStore,
    pub pf: Mlp,
    pub cf: Mlp,
    pub tf: Mlp,
    pub config: HeadConfig,
    feature_dim: usize,
}

/// Tape handles for predicted attributes. Heads that were not requested are
/// `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeadVars {
    pub prob: Option<Var>,
    pub color: Option<Var>,
    pub rotation: Option<Var>,
    pub scale: Option<Var>,
    pub opacity: Option<Var>,
}

/// Which heads a forward pass should build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadMask {
    pub prob: bool,
    pub color: bool,
    pub transform: bool,
}

impl HeadMask {
    pub const ALL: HeadMask = HeadMask {
        prob: true,
        color: true,
        transform: true,
    };
}

impl FieldHeads {
    pub fn new(feature_dim: usize, config: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if !(config.scale_clip > 0.0) {
            return Err(Error::Invalid(format!("scale_clip must be > 0, got {}", config.scale_clip)));
        }
        let mut store = ParamStore::new();
        let dims = |out: usize| {
            let mut d = vec![feature_dim];
            d.extend(&config.hidden);
            d.push(out);
            d
        };
        let pf = Mlp::new(&mut store, "pf", &dims(1), Activation::Relu, FinalInit::Zero, rng);
        let cf = Mlp::new(&mut store, "cf", &dims(3), Activation::Relu, FinalInit::Zero, rng);
        let tf = Mlp::new(&mut store, "tf", &dims(TF_DIM), Activation::Relu, FinalInit::Zero, rng);
        store.get_mut(tf.last().bias).data_mut()[0] = 1.0;
        Ok(Self {
            store,
            pf,
            cf,
            tf,
            config,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Builds the requested heads on a tape. `features` is B×3C.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var, mask: HeadMask) -> Result<HeadVars> {
        let mut out = HeadVars::default();
        if mask.prob {
            let raw = self.pf.forward(tape, bound, features)?;
            out.prob = Some(tape.sigmoid(raw));
        }
        if mask.color {
            let raw = self.cf.forward(tape, bound, features)?;
            out.color = Some(tape.sigmoid(raw));
        }
        if mask.transform {
            let raw = self.tf.forward(tape, bound, features)?;
            let q = tape.slice(raw, 1, 0, 4)?;
            out.rotation = Some(tape.normalize_rows(q)?);
            let s = tape.slice(raw, 1, 4, 3)?;
            let s = tape.sigmoid(s);
            out.scale = Some(tape.scale(s, self.config.scale_clip));
            let o = tape.slice(raw, 1, 7, 1)?;
            out.opacity = Some(tape.sigmoid(o));
        }
        Ok(out)
    }

    pub fn prob_batch(&self, features: &Tensor) -> Result<Vec<f64>> {
        let raw = self.pf.eval(&self.store, features)?;
        Ok(raw.data().iter().map(|v| sigmoid(*v)).collect())
    }

    /// Probabilities and `∂p/∂features` rows.
    pub fn prob_and_feature_grad(&self, features: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (raw, cache) = self.pf.eval_cached(&self.store, features)?;
        let p: Vec<f64> = raw.data().iter().map(|v| sigmoid(*v)).collect();
        let gout = Tensor::new(&[p.len(), 1], p.iter().map(|s| s * (1.0 - s)).collect())?;
        let g = self.pf.input_grad(&self.store, &cache, &gout)?;
        Ok((p, g))
    }

    pub fn attrs_batch(&self, features: &Tensor) -> Result<Vec<Attributes>> {
        let c = self.cf.eval(&self.store, features)?;
        let t = self.tf.eval(&self.store, features)?;
        Ok(c.data()
            .chunks_exact(3)
            .zip(t.data().chunks_exact(TF_DIM))
            .map(|(c, t)| decode_attributes(c, t, self.config.scale_clip))
            .collect())
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_store(prefix, &self.store);
    }
}

/// Applies the output activations to raw head values.
pub fn decode_attributes(color_raw: &[f64], tf_raw: &[f64], scale_clip: f64) -> Attributes {
    let q = &tf_raw[0..4];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rotation = if n > 1e-12 && n.is_finite() {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    } else {
        crate::gs_model::IDENTITY_QUAT
    };
    Attributes {
        color: [sigmoid(color_raw[0]), sigmoid(color_raw[1]), sigmoid(color_raw[2])],
        rotation,
        scale: [
            scale_clip * sigmoid(tf_raw[4]),
            scale_clip * sigmoid(tf_raw[5]),
            scale_clip * sigmoid(tf_raw[6]),
        ],
        opacity: sigmoid(tf_raw[7]),
    }
}

/// A triplane plus heads, evaluable anywhere in the domain.
#[derive(Debug)]
pub struct NeuralField {
    pub triplane: Triplane,
    pub heads: FieldHeads,
    clamped: AtomicU64,
}

impl Clone for NeuralField {
    fn clone(&self) -> Self {
        Self::new(self.triplane.clone(), self.heads.clone()).expect("validated on construction")
    }
}

impl NeuralField {
    pub fn new(triplane: Triplane, heads: FieldHeads) -> Result<Self> {
        if triplane.shape.feature_dim() != heads.feature_dim() {
            return Err(Error::shape(
                "neural field",
                &[triplane.shape.feature_dim()],
                &[heads.feature_dim()],
            ));
        }
        Ok(Self {
            triplane,
            heads,
            clamped: AtomicU64::new(0),
        })
    }

    /// Queries that fell outside [-1,1]³ and were clamped, since creation.
    pub fn clamped_queries(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    fn features(&self, qs: &[Vec3]) -> Tensor {
        let (f, n) = self.triplane.interpolate_batch(qs);
        if n > 0 {
            self.clamped.fetch_add(n as u64, Ordering::Relaxed);
        }
        f
    }

    pub fn eval_pf(&self, q: Vec3) -> f64 {
        self.probability(&[q])[0]
    }

    pub fn eval_attrs(&self, q: Vec3) -> Attributes {
        self.attributes(&[q])[0]
    }

    pub fn grad_position(&self, q: Vec3) -> Vec3 {
        self.probability_and_gradient(&[q])[0].1
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = self.triplane.shape;
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "field",
            "triplane": s,
            "heads": self.heads.config,
        }));
        ck.push("triplane", self.triplane.planes.clone());
        self.heads.write_checkpoint(&mut ck, "heads");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "field" {
            return Err(Error::Format(format!(
                "expected a field checkpoint, found kind {}",
                ck.meta["kind"]
            )));
        }
        let shape: TriplaneShape = meta_field(ck, "triplane")?;
        let config: HeadConfig = meta_field(ck, "heads")?;
        let triplane = Triplane::new(shape, ck.get("triplane")?.clone())?;
        let mut heads = FieldHeads::new(shape.feature_dim(), config, &mut crate::rng::rng(0))?;
        ck.fill_store("heads", &mut heads.store)?;
        Self::new(triplane, heads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn meta_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_value(ck.meta[key].clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata `{key}`: {e}")))
}

impl GaussianField for NeuralField {
    fn probability(&self, points: &[Vec3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let f = self.features(chunk);
            out.extend(self.heads.prob_batch(&f).expect("feature width checked at construction"));
        }
        out
    }

    fn probability_and_gradient(&self, points: &[Vec3]) -> Vec<(f64, Vec3)> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let f = self.features(chunk);
            let (p, g) = self
                .heads
                .prob_and_feature_grad(&f)
                .expect("feature width checked at construction");
            for (i, q) in chunk.iter().enumerate() {
                out.push((p[i], self.triplane.feature_vjp(*q, g.row_slice(i))));
            }
        }
        out
    }

    fn attributes(&self, points: &[Vec3]) -> Vec<Attributes> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let f = self.features(chunk);
            out.extend(self.heads.attrs_batch(&f).expect("feature width checked at construction"));
        }
        out
    }
}

/// Feature of `q` on `t`.
pub fn interpolate(t: &Triplane, q: Vec3) -> Vec<f64> {
    t.interpolate(q)
}

pub fn eval_pf(t: &Triplane, heads: &FieldHeads, q: Vec3) -> Result<f64> {
    let (f, _) = t.interpolate_batch(&[q]);
    Ok(heads.prob_batch(&f)?[0])
}

pub fn eval_attrs(t: &Triplane, heads: &FieldHeads, q: Vec3) -> Result<Attributes> {
    let (f, _) = t.interpolate_batch(&[q]);
    Ok(heads.attrs_batch(&f)?[0])
}

/// Analytic `∂ψ_pf/∂q` through the probability head and bilinear lookup.
pub fn grad_position(t: &Triplane, heads: &FieldHeads, q: Vec3) -> Result<Vec3> {
    let (f, _) = t.interpolate_batch(&[q]);
    let (_, g) = heads.prob_and_feature_grad(&f)?;
    Ok(t.feature_vjp(q, g.row_slice(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_heads(r: &mut impl Rng, dim: usize) -> FieldHeads {
        let mut h = FieldHeads::new(dim, HeadConfig { hidden: vec![16, 16], ..Default::default() }, r).unwrap();
        for t in h.store.tensors_mut() {
            *t = Tensor::randn(t.shape(), 0.7, r);
        }
        h
    }

    #[test]
    fn fresh_heads_are_neutral() {
        let mut r = rng::rng(1);
        let shape = TriplaneShape { h: 4, w: 4, c: 3 };
        let t = Triplane::random(shape, 1.0, &mut r);
        let h = FieldHeads::new(9, HeadConfig::default(), &mut r).unwrap();
        for q in [[0.0; 3], [0.3, -0.2, 0.9]] {
            assert_eq!(eval_pf(&t, &h, q).unwrap(), 0.5);
            let a = eval_attrs(&t, &h, q).unwrap();
            assert_eq!(a.rotation, [1.0, 0.0, 0.0, 0.0]);
            assert_eq!(a.opacity, 0.5);
            assert_eq!(a.scale, [0.005; 3]);
        }
    }

    #[test]
    fn outputs_respect_attribute_ranges_for_random_weights() {
        let mut r = rng::rng(2);
        let shape = TriplaneShape { h: 6, w: 6, c: 4 };
        let field = NeuralField::new(Triplane::random(shape, 2.0, &mut r), random_heads(&mut r, 12)).unwrap();
        let qs: Vec<Vec3> = (0..10_000)
            .map(|_| [r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0)])
            .collect();
        for (p, a) in field.probability(&qs).iter().zip(field.attributes(&qs)) {
            assert!((0.0..=1.0).contains(p));
            let qn = a.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((qn - 1.0).abs() < 1e-9);
            assert!(a.scale.iter().all(|s| *s > 0.0 && *s <= SCALE_CLIP));
            assert!((0.0..=1.0).contains(&a.opacity));
            assert!(a.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn position_gradient_matches_finite_differences() {
        let mut r = rng::rng(3);
        let shape = TriplaneShape { h: 8, w: 8, c: 4 };
        let field = NeuralField::new(Triplane::random(shape, 1.0, &mut r), random_heads(&mut r, 12)).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let q = [r.random_range(-0.9..0.9), r.random_range(-0.9..0.9), r.random_range(-0.9..0.9)];
            let near_node = q.iter().any(|v| {
                let u: f64 = (v + 1.0) * 0.5 * 7.0;
                (u - u.round()).abs() < 1e-3
            });
            if near_node {
                continue;
            }
            let g = field.grad_position(q);
            let mut fd = [0.0; 3];
            for k in 0..3 {
                let (mut a, mut b) = (q, q);
                a[k] += h;
                b[k] -= h;
                fd[k] = (field.eval_pf(a) - field.eval_pf(b)) / (2.0 * h);
            }
            let diff = crate::math::norm(crate::math::sub(g, fd));
            let scale = crate::math::norm(g).max(crate::math::norm(fd));
            assert!(diff <= 1e-3 * scale + 1e-12, "{g:?} vs {fd:?}");
            checked += 1;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng::rng(4);
        let shape = TriplaneShape { h: 4, w: 5, c: 2 };
        let field = NeuralField::new(Triplane::random(shape, 1.0, &mut r), random_heads(&mut r, 6)).unwrap();
        let back = NeuralField::from_checkpoint(&Checkpoint::from_bytes(&field.to_checkpoint().to_bytes()).unwrap()).unwrap();
        let q = [0.1, 0.2, -0.3];
        assert_eq!(field.eval_pf(q), back.eval_pf(q));
        assert_eq!(field.eval_attrs(q), back.eval_attrs(q));
    }

    #[test]
    fn clamped_queries_are_counted() {
        let mut r = rng::rng(5);
        let shape = TriplaneShape { h: 4, w: 4, c: 2 };
        let field = NeuralField::new(Triplane::random(shape, 1.0, &mut r), random_heads(&mut r, 6)).unwrap();
        field.probability(&[[0.0; 3], [2.0, 0.0, 0.0]]);
        assert_eq!(field.clamped_queries(), 1);
    }
}
