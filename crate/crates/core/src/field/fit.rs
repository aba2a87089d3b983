//! Direct per-shape fitting of a triplane and heads to labelled queries.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{FieldHeads, HeadConfig, HeadMask, HeadVars, NeuralField, Triplane, TriplaneShape};
use crate::gs_model::{Attributes, GaussianSplat};
use crate::gt_functions::FieldSampleSet;
use crate::math::{quat_dot, Vec3};
use crate::numeric::{Adam, ParamStore, Tape, Tensor, Var};
use crate::{rng, Error, Result};

/// Per-group weights of the joint L1 objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub prob: f64,
    pub color: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            prob: 1.0,
            color: 1.0,
            rotation: 1.0,
            scale: 1.0,
            opacity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn prob_only() -> Self {
        Self {
            prob: 1.0,
            color: 0.0,
            rotation: 0.0,
            scale: 0.0,
            opacity: 0.0,
        }
    }

    /// Heads whose groups carry weight.
    pub fn mask(&self) -> HeadMask {
        HeadMask {
            prob: self.prob != 0.0,
            color: self.color != 0.0,
            transform: self.rotation != 0.0 || self.scale != 0.0 || self.opacity != 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub triplane: TriplaneShape,
    pub heads: HeadConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate of the plane features.
    pub plane_lr: f64,
    pub plane_init_std: f64,
    pub weights: LossWeights,
    pub val_fraction: f64,
    pub eval_every: usize,
    /// Anneal both learning rates to zero with a cosine schedule.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            triplane: TriplaneShape::default(),
            heads: HeadConfig::default(),
            steps: 2000,
            batch: 512,
            lr: 1e-3,
            plane_lr: 1e-2,
            plane_init_std: 0.1,
            weights: LossWeights::default(),
            val_fraction: 0.1,
            eval_every: 100,
            cosine_decay: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub field: NeuralField,
    /// Training loss at every step.
    pub train_loss: Vec<f64>,
    /// (step, validation loss) at every evaluation, including step 0.
    pub val_loss: Vec<(usize, f64)>,
    /// Mean |p̂ − p| on the validation split after training.
    pub val_prob_l1: f64,
    pub val_count: usize,
}

/// Label tensors for one batch of queries. Scales are expressed in units of
/// the scale bound so every group lives on a comparable range.
pub(crate) struct LabelBatch {
    pub prob: Tensor,
    pub color: Tensor,
    pub rotation: Vec<[f64; 4]>,
    pub scale: Tensor,
    pub opacity: Tensor,
}

impl LabelBatch {
    pub fn gather(samples: &FieldSampleSet, idx: &[usize], scale_clip: f64) -> Self {
        let n = idx.len();
        let a: Vec<&Attributes> = idx.iter().map(|i| &samples.attr_labels[*i]).collect();
        Self {
            prob: Tensor::new(&[n, 1], idx.iter().map(|i| samples.prob_labels[*i]).collect()).unwrap(),
            color: Tensor::new(&[n, 3], a.iter().flat_map(|a| a.color).collect()).unwrap(),
            rotation: a.iter().map(|a| a.rotation).collect(),
            scale: Tensor::new(&[n, 3], a.iter().flat_map(|a| a.scale.map(|s| s / scale_clip)).collect()).unwrap(),
            opacity: Tensor::new(&[n, 1], a.iter().map(|a| a.opacity).collect()).unwrap(),
        }
    }
}

/// Weighted sum of per-group mean L1 losses. The target quaternion is
/// sign-aligned with the prediction row by row.
pub(crate) fn attribute_loss(
    tape: &mut Tape,
    pred: &HeadVars,
    labels: &LabelBatch,
    weights: &LossWeights,
    scale_clip: f64,
) -> Result<Var> {
    let mut terms = Vec::new();
    if let (Some(p), true) = (pred.prob, weights.prob != 0.0) {
        let t = tape.constant(labels.prob.clone());
        let l = tape.l1_loss(p, t)?;
        terms.push(tape.scale(l, weights.prob));
    }
    if let (Some(c), true) = (pred.color, weights.color != 0.0) {
        let t = tape.constant(labels.color.clone());
        let l = tape.l1_loss(c, t)?;
        terms.push(tape.scale(l, weights.color));
    }
    if let (Some(r), true) = (pred.rotation, weights.rotation != 0.0) {
        let pv = tape.value(r);
        let mut aligned = Vec::with_capacity(labels.rotation.len() * 4);
        for (i, q) in labels.rotation.iter().enumerate() {
            let p: [f64; 4] = pv.row_slice(i).try_into().unwrap();
            let s = if quat_dot(p, *q) < 0.0 { -1.0 } else { 1.0 };
            aligned.extend(q.iter().map(|v| v * s));
        }
        let t = tape.constant(Tensor::new(&[labels.rotation.len(), 4], aligned)?);
        let l = tape.l1_loss(r, t)?;
        terms.push(tape.scale(l, weights.rotation));
    }
    if let (Some(s), true) = (pred.scale, weights.scale != 0.0) {
        let s = tape.scale(s, 1.0 / scale_clip);
        let t = tape.constant(labels.scale.clone());
        let l = tape.l1_loss(s, t)?;
        terms.push(tape.scale(l, weights.scale));
    }
    if let (Some(o), true) = (pred.opacity, weights.opacity != 0.0) {
        let t = tape.constant(labels.opacity.clone());
        let l = tape.l1_loss(o, t)?;
        terms.push(tape.scale(l, weights.opacity));
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::Invalid("all loss weights are zero".into()))?;
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    Ok(total)
}

pub(crate) fn queries_tensor(samples: &FieldSampleSet, idx: &[usize]) -> Tensor {
    Tensor::new(&[idx.len(), 3], idx.iter().flat_map(|i| samples.queries[*i]).collect()).unwrap()
}

/// Splits `0..m` into (train, validation) index lists.
pub(crate) fn split_indices(m: usize, val_fraction: f64, r: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(r);
    let val = if m < 2 {
        0
    } else {
        ((m as f64 * val_fraction).round() as usize).clamp(1, m - 1)
    };
    let train = idx.split_off(val);
    if val == 0 {
        return (train.clone(), train);
    }
    (train, idx)
}

/// Loss of a field on a fixed index set, without gradients.
pub(crate) fn eval_loss(
    field: &NeuralField,
    samples: &FieldSampleSet,
    idx: &[usize],
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut prob_l1 = 0.0;
    for chunk in idx.chunks(1024) {
        let labels = LabelBatch::gather(samples, chunk, field.heads.config.scale_clip);
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&field.heads.store);
        let planes = tape.leaf_ref(&field.triplane.planes, false);
        let q = tape.constant(queries_tensor(samples, chunk));
        let s = field.triplane.shape;
        let f = tape.triplane(planes, q, s.h, s.w, s.c)?;
        let mut mask = weights.mask();
        mask.prob = true;
        let pred = field.heads.forward(&mut tape, &bound, f, mask)?;
        let loss = attribute_loss(&mut tape, &pred, &labels, weights, field.heads.config.scale_clip)?;
        let n = chunk.len() as f64;
        total += tape.value(loss).item() * n;
        let p = tape.value(pred.prob.unwrap());
        prob_l1 += p
            .data()
            .iter()
            .zip(labels.prob.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    let n = idx.len().max(1) as f64;
    Ok((total / n, prob_l1 / n))
}

/// Fits a fresh triplane and heads to `samples` with Adam on the joint L1
/// objective. Deterministic for a fixed seed.
pub fn fit_field(splat: &GaussianSplat, samples: &FieldSampleSet, cfg: &FitConfig) -> Result<FitResult> {
    if samples.is_empty() {
        return Err(Error::Invalid("fit_field needs a non-empty sample set".into()));
    }
    if splat.is_empty() {
        return Err(Error::Invalid("fit_field needs a non-empty splat".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    cfg.triplane.validate()?;
    let mut r = rng::rng(rng::derive_seed(cfg.seed, "fit_field"));
    let (train, val) = split_indices(samples.len(), cfg.val_fraction, &mut r);

    let shape = cfg.triplane;
    let mut planes = ParamStore::new();
    planes.add("planes", Tensor::randn(&[3, shape.h, shape.w, shape.c], cfg.plane_init_std, &mut r));
    let mut heads = FieldHeads::new(shape.feature_dim(), cfg.heads.clone(), &mut r)?;
    let mut head_opt = Adam::new(cfg.lr);
    let mut plane_opt = Adam::new(cfg.plane_lr);
    let mask = cfg.weights.mask();
    let clip = cfg.heads.scale_clip;

    let snapshot = |planes: &ParamStore, heads: &FieldHeads| -> Result<NeuralField> {
        NeuralField::new(Triplane::new(shape, planes.iter().next().unwrap().1.clone())?, heads.clone())
    };
    let mut train_loss = Vec::with_capacity(cfg.steps);
    let mut val_loss = Vec::new();
    val_loss.push((0, eval_loss(&snapshot(&planes, &heads)?, samples, &val, &cfg.weights)?.0));

    let mut batch = vec![0usize; cfg.batch.min(train.len())];
    for step in 1..=cfg.steps {
        for b in batch.iter_mut() {
            *b = train[r.random_range(0..train.len())];
        }
        let labels = LabelBatch::gather(samples, &batch, clip);
        let (head_grads, plane_grads, loss) = {
            let mut tape = Tape::new();
            let hb = tape.bind(&heads.store);
            let pb = tape.bind(&planes);
            let q = tape.constant(queries_tensor(samples, &batch));
            let pv = pb.var(planes.find("planes").unwrap());
            let f = tape.triplane(pv, q, shape.h, shape.w, shape.c)?;
            let pred = heads.forward(&mut tape, &hb, f, mask)?;
            let loss = attribute_loss(&mut tape, &pred, &labels, &cfg.weights, clip)?;
            let lv = tape.value(loss).item();
            let mut g = tape.backward(loss)?;
            (hb.grads(&mut g), pb.grads(&mut g), lv)
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("fit_field: loss became {loss} at step {step}")));
        }
        train_loss.push(loss);
        if cfg.cosine_decay {
            let f = cosine_factor(step, cfg.steps);
            head_opt.lr = cfg.lr * f;
            plane_opt.lr = cfg.plane_lr * f;
        }
        head_opt.step(&mut heads.store, &head_grads)?;
        plane_opt.step(&mut planes, &plane_grads)?;
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let v = eval_loss(&snapshot(&planes, &heads)?, samples, &val, &cfg.weights)?.0;
            val_loss.push((step, v));
            log::debug!("fit_field step {step}: train {loss:.5} val {v:.5}");
        }
    }
    let field = snapshot(&planes, &heads)?;
    let (_, val_prob_l1) = eval_loss(&field, samples, &val, &cfg.weights)?;
    Ok(FitResult {
        field,
        train_loss,
        val_loss,
        val_prob_l1,
        val_count: val.len(),
    })
}

/// Cosine annealing factor for step `step` (1-based) of `total`.
pub(crate) fn cosine_factor(step: usize, total: usize) -> f64 {
    0.5 * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / total.max(1) as f64).cos())
}

/// Mean |ψ_pf − label| over the given queries.
pub fn prob_l1(field: &NeuralField, queries: &[Vec3], labels: &[f64]) -> f64 {
    use crate::field_api::GaussianField;
    let p = field.probability(queries);
    p.iter().zip(labels).map(|(a, b)| (a - b).abs()).sum::<f64>() / labels.len().max(1) as f64
}
