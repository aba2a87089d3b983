use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{EncoderInput, GaussianVae, VaeConfig};
use crate::field::fit::{attribute_loss, cosine_factor, LabelBatch};
use crate::gs_model::GaussianSplat;
use crate::gt_functions::{sample_training_queries, FieldSampleSet};
use crate::numeric::{Adam, Tape, Tensor};
use crate::{rng, Error, Result};

/// One training shape with its cached labelled queries.
#[derive(Clone, Debug)]
pub struct VaeExample {
    pub splat: GaussianSplat,
    pub samples: FieldSampleSet,
}

#[derive(Clone, Debug)]
pub struct TrainedVae {
    pub vae: GaussianVae,
    /// Loss of every step.
    pub loss: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains encoder, decoder and heads jointly. When `checkpoint` is given the
/// model is written there after every epoch; a non-finite loss aborts
/// without touching the last written file.
pub fn train_vae(data: &[VaeExample], cfg: &VaeConfig, checkpoint: Option<&Path>) -> Result<TrainedVae> {
    if data.is_empty() {
        return Err(Error::Invalid("train_vae needs at least one shape".into()));
    }
    if let Some(i) = data.iter().position(|d| d.samples.is_empty() || d.splat.is_empty()) {
        return Err(Error::Invalid(format!("shape {i} has no Gaussians or no samples")));
    }
    if cfg.batch_shapes == 0 || cfg.queries_per_shape == 0 {
        return Err(Error::Invalid("batch_shapes and queries_per_shape must be positive".into()));
    }
    let mut vae = GaussianVae::new(cfg.clone())?;
    let mut r = rng::rng(rng::derive_seed(cfg.seed, "train_vae"));
    let mut opt = Adam::new(cfg.lr);
    let mut head_opt = Adam::new(cfg.lr);
    let mask = cfg.weights.mask();
    let clip = cfg.heads.scale_clip;
    let shape = cfg.triplane;
    let d = cfg.latent_dim;
    let total = cfg.epochs * cfg.steps_per_epoch;

    let mut samples: Vec<FieldSampleSet> = data.iter().map(|d| d.samples.clone()).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(total);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if let (Some(sc), true) = (&cfg.resample, epoch > 0) {
            for (i, ex) in data.iter().enumerate() {
                let seed = rng::derive_seed_n(rng::derive_seed(cfg.seed, "resample"), (epoch * data.len() + i) as u64);
                samples[i] = sample_training_queries(&ex.splat, sc.n_near, sc.n_uniform, sc.near_sigma, seed, &sc.truncation)?;
            }
        }
        order.shuffle(&mut r);
        let mut cursor = 0;
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            step += 1;
            let mut batch = Vec::with_capacity(cfg.batch_shapes);
            for _ in 0..cfg.batch_shapes.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut r);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let inputs: Vec<EncoderInput> = batch.iter().map(|&i| EncoderInput::Splat(&data[i].splat)).collect();
            let (rows, offsets) = vae.stack(&inputs)?;
            let mut merged = FieldSampleSet::default();
            let mut query_counts = Vec::with_capacity(batch.len());
            for &i in &batch {
                let s = &samples[i];
                let idx: Vec<usize> = (0..cfg.queries_per_shape.min(s.len()))
                    .map(|_| r.random_range(0..s.len()))
                    .collect();
                let sel = s.select(&idx);
                query_counts.push(sel.len());
                merged.queries.extend(sel.queries);
                merged.prob_labels.extend(sel.prob_labels);
                merged.attr_labels.extend(sel.attr_labels);
            }
            let all: Vec<usize> = (0..merged.len()).collect();
            let labels = LabelBatch::gather(&merged, &all, clip);
            let eps = Tensor::new(
                &[batch.len(), d],
                (0..batch.len() * d).map(|_| r.sample(StandardNormal)).collect(),
            )?;

            let (grads, head_grads, loss) = {
                let mut tape = Tape::new();
                let vb = tape.bind(&vae.store);
                let hb = tape.bind(&vae.heads.store);
                let x = tape.constant(rows);
                let enc = vae.encoder.forward(&mut tape, &vb, x, &offsets)?;
                let mean = tape.slice(enc, 1, 0, d)?;
                let log_var = tape.slice(enc, 1, d, d)?;
                let half = tape.scale(log_var, 0.5);
                let std = tape.exp(half);
                let e = tape.constant(eps);
                let noise = tape.mul(std, e)?;
                let z = tape.add(mean, noise)?;
                let planes = vae.decoder.forward(&mut tape, &vb, z)?;
                let mut feats = Vec::with_capacity(batch.len());
                let mut start = 0;
                for (b, n) in query_counts.iter().enumerate() {
                    let p = tape.slice(planes, 0, b, 1)?;
                    let q = tape.constant(Tensor::new(
                        &[*n, 3],
                        merged.queries[start..start + n].iter().flatten().copied().collect(),
                    )?);
                    feats.push(tape.triplane(p, q, shape.h, shape.w, shape.c)?);
                    start += n;
                }
                let f = tape.concat(&feats, 0)?;
                let pred = vae.heads.forward(&mut tape, &hb, f, mask)?;
                let recon = attribute_loss(&mut tape, &pred, &labels, &cfg.weights, clip)?;
                // KL per shape, averaged over the batch.
                let m2 = tape.mul(mean, mean)?;
                let ev = tape.exp(log_var);
                let a = tape.sub(log_var, m2)?;
                let a = tape.sub(a, ev)?;
                let a = tape.add_scalar(a, 1.0);
                let s = tape.sum(a);
                let kl = tape.scale(s, -0.5 / batch.len() as f64);
                let kl = tape.scale(kl, cfg.beta);
                let loss = tape.add(recon, kl)?;
                let lv = tape.value(loss).item();
                let mut g = tape.backward(loss)?;
                (vb.grads(&mut g), hb.grads(&mut g), lv)
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "train_vae: loss became {loss} at epoch {epoch} step {step}"
                )));
            }
            if cfg.cosine_decay {
                let f = cosine_factor(step, total);
                opt.lr = cfg.lr * f;
                head_opt.lr = cfg.lr * f;
            }
            opt.step(&mut vae.store, &grads)?;
            head_opt.step(&mut vae.heads.store, &head_grads)?;
            loss_curve.push(loss);
            sum += loss;
        }
        let mean = sum / cfg.steps_per_epoch.max(1) as f64;
        log::info!("train_vae epoch {epoch}: loss {mean:.5}");
        epoch_loss.push(mean);
        if let Some(path) = checkpoint {
            vae.save(path)?;
        }
    }
    Ok(TrainedVae {
        vae,
        loss: loss_curve,
        epoch_loss,
    })
}
