//! Fully connected layers usable both on a tape and in plain batched form.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Bound, Tape, Var};
use super::tensor::{gemm, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - pre.tanh().powi(2),
        }
    }
}

/// Initialisation of the last layer's weights. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinalInit {
    He,
    Zero,
    /// He-uniform scaled by the given factor.
    Scaled(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
        let w = if gain == 0.0 {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            Tensor::uniform(&[fan_in, fan_out], bound, rng)
        };
        let weight = store.add(format!("{name}.w"), w);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.weight))?;
        tape.add_bias(h, bound.var(self.bias))
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (b, k) = x.require_2d("linear")?;
        if k != self.fan_in {
            return Err(Error::shape("linear", x.shape(), store.get(self.weight).shape()));
        }
        let bias = store.get(self.bias).data();
        let mut out = Vec::with_capacity(b * self.fan_out);
        for _ in 0..b {
            out.extend_from_slice(bias);
        }
        gemm(b, k, self.fan_out, x.data(), false, store.get(self.weight).data(), false, &mut out, true);
        Tensor::new(&[b, self.fan_out], out)
    }
}

/// Multi-layer perceptron with a shared hidden activation and a linear
/// output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Hidden pre-activations kept for [`Mlp::input_grad`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    pre: Vec<Tensor>,
}

impl Mlp {
    /// `dims` lists input width, hidden widths and output width.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        last: FinalInit,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 < n {
                    1.0
                } else {
                    match last {
                        FinalInit::He => 1.0,
                        FinalInit::Zero => 0.0,
                        FinalInit::Scaled(s) => s,
                    }
                };
                Linear::new(store, &format!("{prefix}.{i}"), dims[i], dims[i + 1], gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, bound, x)?;
            if i + 1 < n {
                x = match self.activation {
                    Activation::Relu => tape.relu(x),
                    Activation::Tanh => tape.tanh(x),
                };
            }
        }
        Ok(x)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval_cached(store, x)?.0)
    }

    pub fn eval_cached(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n - 1);
        let mut h = self.layers[0].eval(store, x)?;
        for l in &self.layers[1..] {
            let mut a = h.clone();
            a.data_mut().iter_mut().for_each(|v| *v = self.activation.apply(*v));
            pre.push(h);
            h = l.eval(store, &a)?;
        }
        Ok((h, MlpCache { pre }))
    }

    /// Vector-Jacobian product with respect to the input: returns
    /// `gout · ∂out/∂x` row by row.
    pub fn input_grad(&self, store: &ParamStore, cache: &MlpCache, gout: &Tensor) -> Result<Tensor> {
        let (b, o) = gout.require_2d("mlp input_grad")?;
        if o != self.out_dim() {
            return Err(Error::shape("mlp input_grad", gout.shape(), &[b, self.out_dim()]));
        }
        let mut g = gout.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let mut gi = vec![0.0; b * l.fan_in];
            gemm(b, l.fan_out, l.fan_in, g.data(), false, store.get(l.weight).data(), true, &mut gi, false);
            if i > 0 {
                for (v, p) in gi.iter_mut().zip(cache.pre[i - 1].data()) {
                    *v *= self.activation.derivative(*p);
                }
            }
            g = Tensor::new(&[b, l.fan_in], gi)?;
        }
        Ok(g)
    }
}

/// Permutation-invariant set encoder: a shared per-element MLP, ReLU,
/// column-wise max over each set, then an MLP on the pooled vector.
#[derive(Clone, Debug)]
pub struct SetEncoder {
    pub point: Mlp,
    pub head: Mlp,
}

impl SetEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        width: usize,
        out_dim: usize,
        last: FinalInit,
        rng: &mut impl Rng,
    ) -> Self {
        let point = Mlp::new(store, &format!("{prefix}.point"), &[in_dim, width, width], Activation::Relu, FinalInit::He, rng);
        let head = Mlp::new(store, &format!("{prefix}.head"), &[width, width, out_dim], Activation::Relu, last, rng);
        Self { point, head }
    }

    pub fn in_dim(&self) -> usize {
        self.point.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    /// `rows` stacks every set's elements; `offsets` holds set starts plus
    /// the total row count. Returns one row per set.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, rows: Var, offsets: &[usize]) -> Result<Var> {
        let h = self.point.forward(tape, bound, rows)?;
        let h = tape.relu(h);
        let pooled = tape.segment_max(h, offsets)?;
        self.head.forward(tape, bound, pooled)
    }

    pub fn eval(&self, store: &ParamStore, rows: &Tensor, offsets: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(store);
        let x = tape.leaf_ref(rows, false);
        let out = self.forward(&mut tape, &bound, x, offsets)?;
        Ok(tape.value(out).clone())
    }
}
