use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

/// Adam with per-tensor moment buffers. Tensors whose gradient contains a
/// non-finite value are left untouched for that step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    skipped: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of tensor updates skipped because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// One update. `grads[i]` belongs to the i-th tensor of `params`;
    /// `None` means no gradient reached it.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            for (_, t) in params.iter() {
                self.m.push(vec![0.0; t.len()]);
                self.v.push(vec![0.0; t.len()]);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                self.skipped += 1;
                continue;
            }
            let (b1, b2) = (self.beta1, self.beta2);
            let (step, eps) = (self.lr / bc1, self.eps);
            let inv_bc2 = 1.0 / bc2;
            for (((w, gj), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.m[i].iter_mut())
                .zip(self.v[i].iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * gj;
                *v = b2 * *v + (1.0 - b2) * gj * gj;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
