//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its output; `backward` walks the nodes in
//! reverse insertion order (a valid reverse topological order) exactly once.

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::{grid_coord, PLANE_AXES};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    L1Loss(Var, Var),
    MseLoss(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    NormalizeRows(Var),
    GatherRows { input: Var, index: Vec<usize> },
    SegmentMax { input: Var, argmax: Vec<usize> },
    Triplane { planes: Var, queries: Var, h: usize, w: usize, c: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Leaves may borrow tensors for the tape's lifetime,
/// so parameters are not copied per step.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

/// Gradients of leaves created with `requires_grad`.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Leaves bound to a [`ParamStore`], one per parameter in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }

    /// Moves this store's gradients out of `grads`, in store order.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.0.iter().map(|v| grads.take(*v)).collect()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that borrows `t` instead of copying it.
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every parameter of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &'a ParamStore) -> Bound {
        Bound(store.iter().map(|(_, t)| self.leaf_ref(t, true)).collect())
    }

    /// Registers parameters as constants (no gradients).
    pub fn bind_frozen(&mut self, store: &'a ParamStore) -> Bound {
        Bound(store.iter().map(|(_, t)| self.leaf_ref(t, false)).collect())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector across the last dimension.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c || ta.shape().is_empty() {
            return Err(Error::shape("add_bias", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |v| v + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), crate::math::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip("l1_loss", a, b, |x, y| (x - y).abs())?;
        let s = d.data().iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::L1Loss(a, b), rg))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip("mse_loss", a, b, |x, y| (x - y) * (x - y))?;
        let s = d.data().iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::MseLoss(a, b), rg))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let (r0, c0) = self.value(first).require_2d("concat")?;
        let mut rows = 0;
        let mut cols = 0;
        for p in parts {
            let (r, c) = self.value(*p).require_2d("concat")?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok || axis > 1 {
                return Err(Error::shape("concat", self.value(first).shape(), self.value(*p).shape()));
            }
            rows += r;
            cols += c;
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(rows * c0);
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
            }
            Tensor::new(&[rows, c0], data)?
        } else {
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row_slice(r));
                }
            }
            Tensor::new(&[r0, cols], data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.require_2d("slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::shape("slice", t.shape(), &[start, start + len]));
        }
        let out = if axis == 0 {
            Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row_slice(i)[start..start + len]);
            }
            Tensor::new(&[r, len], data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        t.require_2d("normalize_rows")?;
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::NormalizeRows(a), rg))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.require_2d("gather_rows")?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::shape("gather_rows", t.shape(), &[i]));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(&[index.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise max over consecutive row segments. `offsets` holds segment
    /// starts followed by the total row count; ties pick the first row.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.require_2d("segment_max")?;
        if offsets.len() < 2 || *offsets.last().unwrap() != r || offsets[0] != 0 {
            return Err(Error::shape("segment_max", t.shape(), offsets));
        }
        let segs = offsets.len() - 1;
        let mut data = vec![f64::NEG_INFINITY; segs * c];
        let mut argmax = vec![0usize; segs * c];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi <= lo {
                return Err(Error::Invalid(format!("segment {s} is empty")));
            }
            for i in lo..hi {
                for (j, v) in t.row_slice(i).iter().enumerate() {
                    if *v > data[s * c + j] || i == lo {
                        data[s * c + j] = *v;
                        argmax[s * c + j] = i;
                    }
                }
            }
        }
        let out = Tensor::new(&[segs, c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentMax { input: a, argmax }, rg))
    }

    /// Bilinear triplane lookup. `planes` holds 3·h·w·c values laid out as
    /// `[plane][row][col][channel]`; `queries` is B×3. Output is B×3c in
    /// XY, XZ, YZ order.
    pub fn triplane(&mut self, planes: Var, queries: Var, h: usize, w: usize, c: usize) -> Result<Var> {
        let tp = self.value(planes);
        let tq = self.value(queries);
        if tp.len() != 3 * h * w * c || h < 2 || w < 2 {
            return Err(Error::shape("triplane", tp.shape(), &[3, h, w, c]));
        }
        let (b, three) = tq.require_2d("triplane")?;
        if three != 3 {
            return Err(Error::shape("triplane", tq.shape(), &[b, 3]));
        }
        let mut out = vec![0.0; b * 3 * c];
        let pd = tp.data();
        for (qi, q) in tq.data().chunks_exact(3).enumerate() {
            for (p, (a0, a1)) in PLANE_AXES.iter().enumerate() {
                let (ix, fx, _) = grid_coord(q[*a0], w);
                let (iy, fy, _) = grid_coord(q[*a1], h);
                let base = p * h * w * c;
                let o = &mut out[(qi * 3 + p) * c..(qi * 3 + p + 1) * c];
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        let wgt = wx * wy;
                        let src = &pd[base + ((iy + dy) * w + ix + dx) * c..][..c];
                        for (acc, v) in o.iter_mut().zip(src) {
                            *acc += wgt * v;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, 3 * c], out)?;
        let rg = self.rg(&[planes, queries]);
        Ok(self.push(
            out,
            Op::Triplane {
                planes,
                queries,
                h,
                w,
                c,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. A tape can be differentiated once per
    /// forward recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Invalid(
                "backward already ran on this tape; record a new forward pass first".into(),
            ));
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.consumed = true;
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(&shape, vec![1.0]).unwrap());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(i), g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn map_grad(&self, like: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let shape = self.value(like).shape();
        Tensor::new(shape, g.data().iter().enumerate().map(|(i, v)| f(i, *v)).collect()).unwrap()
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.acc(grads, *a, Tensor::new(ta.shape(), da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.acc(grads, *b, Tensor::new(tb.shape(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, self.map_grad(*b, g, |_, v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, self.map_grad(*a, g, |j, v| v * tb.data()[j]));
                self.acc(grads, *b, self.map_grad(*b, g, |j, v| v * ta.data()[j]));
            }
            Op::AddBias(a, bias) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let tb = self.value(*bias);
                    let c = tb.len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *bias, Tensor::new(tb.shape(), db)?);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, self.map_grad(*a, g, |_, v| v * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, self.map_grad(*a, g, |j, v| if x.data()[j] > 0.0 { v } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, self.map_grad(*a, g, |j, v| {
                    let s = y.data()[j];
                    v * s * (1.0 - s)
                }));
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, self.map_grad(*a, g, |j, v| {
                    let t = y.data()[j];
                    v * (1.0 - t * t)
                }));
            }
            Op::Exp(a) => self.acc(grads, *a, self.map_grad(*a, g, |j, v| v * y.data()[j])),
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, self.map_grad(*a, g, |j, v| v / x.data()[j]));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, self.map_grad_full(*a, gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.acc(grads, *a, self.map_grad_full(*a, g.item() / n));
            }
            Op::L1Loss(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.len().max(1) as f64;
                let gv = g.item() / n;
                let sign: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            gv
                        } else if d < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.requires_grad(*b) {
                    self.acc(grads, *b, Tensor::new(tb.shape(), sign.iter().map(|v| -v).collect())?);
                }
                self.acc(grads, *a, Tensor::new(ta.shape(), sign)?);
            }
            Op::MseLoss(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.len().max(1) as f64;
                let gv = 2.0 * g.item() / n;
                let d: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| gv * (x - y)).collect();
                if self.requires_grad(*b) {
                    self.acc(grads, *b, Tensor::new(tb.shape(), d.iter().map(|v| -v).collect())?);
                }
                self.acc(grads, *a, Tensor::new(ta.shape(), d)?);
            }
            Op::Concat { parts, axis } => {
                let (_, cols) = g.require_2d("concat")?;
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let (r, c) = (tp.rows(), tp.cols());
                    if self.requires_grad(*p) {
                        let data = if *axis == 0 {
                            g.data()[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            (0..r)
                                .flat_map(|row| g.row_slice(row)[offset..offset + c].iter().copied())
                                .collect()
                        };
                        self.acc(grads, *p, Tensor::new(tp.shape(), data)?);
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { input, axis, start } => {
                let ti = self.value(*input);
                let (r, c) = (ti.rows(), ti.cols());
                let mut d = vec![0.0; r * c];
                if *axis == 0 {
                    d[start * c..start * c + g.len()].copy_from_slice(g.data());
                } else {
                    let len = g.cols();
                    for row in 0..r {
                        d[row * c + start..row * c + start + len].copy_from_slice(g.row_slice(row));
                    }
                }
                self.acc(grads, *input, Tensor::new(ti.shape(), d)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (r, (xr, (yr, gr))) in x
                    .data()
                    .chunks_exact(c)
                    .zip(y.data().chunks_exact(c).zip(g.data().chunks_exact(c)))
                    .enumerate()
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - yr[j] * yg) / n;
                    }
                }
                self.acc(grads, *a, Tensor::new(x.shape(), d)?);
            }
            Op::GatherRows { input, index } => {
                let ti = self.value(*input);
                let c = ti.cols();
                let mut d = vec![0.0; ti.len()];
                for (o, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g.data()[o * c + j];
                    }
                }
                self.acc(grads, *input, Tensor::new(ti.shape(), d)?);
            }
            Op::SegmentMax { input, argmax } => {
                let ti = self.value(*input);
                let c = ti.cols();
                let mut d = vec![0.0; ti.len()];
                for (k, &row) in argmax.iter().enumerate() {
                    d[row * c + k % c] += g.data()[k];
                }
                self.acc(grads, *input, Tensor::new(ti.shape(), d)?);
            }
            Op::Triplane {
                planes,
                queries,
                h,
                w,
                c,
            } => self.triplane_backward(*planes, *queries, *h, *w, *c, g, grads)?,
        }
        Ok(())
    }

    fn map_grad_full(&self, like: Var, v: f64) -> Tensor {
        Tensor::full(self.value(like).shape(), v)
    }

    #[allow(clippy::too_many_arguments)]
    fn triplane_backward(
        &self,
        planes: Var,
        queries: Var,
        h: usize,
        w: usize,
        c: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let tp = self.value(planes);
        let tq = self.value(queries);
        let want_p = self.requires_grad(planes);
        let want_q = self.requires_grad(queries);
        let mut dp = if want_p { vec![0.0; tp.len()] } else { Vec::new() };
        let mut dq = if want_q { vec![0.0; tq.len()] } else { Vec::new() };
        let pd = tp.data();
        for (qi, q) in tq.data().chunks_exact(3).enumerate() {
            for (p, (a0, a1)) in PLANE_AXES.iter().enumerate() {
                let (ix, fx, cx) = grid_coord(q[*a0], w);
                let (iy, fy, cy) = grid_coord(q[*a1], h);
                let base = p * h * w * c;
                let go = &g.data()[(qi * 3 + p) * c..(qi * 3 + p + 1) * c];
                let i00 = base + (iy * w + ix) * c;
                let i10 = i00 + c;
                let i01 = base + ((iy + 1) * w + ix) * c;
                let i11 = i01 + c;
                if want_p {
                    let wts = [
                        (i00, (1.0 - fx) * (1.0 - fy)),
                        (i10, fx * (1.0 - fy)),
                        (i01, (1.0 - fx) * fy),
                        (i11, fx * fy),
                    ];
                    for (idx, wgt) in wts {
                        for (d, gv) in dp[idx..idx + c].iter_mut().zip(go) {
                            *d += wgt * gv;
                        }
                    }
                }
                if want_q {
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ch in 0..c {
                        let (v00, v10, v01, v11) = (pd[i00 + ch], pd[i10 + ch], pd[i01 + ch], pd[i11 + ch]);
                        du += go[ch] * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                        dv += go[ch] * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                    }
                    if !cx {
                        dq[qi * 3 + a0] += du * 0.5 * (w - 1) as f64;
                    }
                    if !cy {
                        dq[qi * 3 + a1] += dv * 0.5 * (h - 1) as f64;
                    }
                }
            }
        }
        if want_p {
            self.acc(grads, planes, Tensor::new(tp.shape(), dp)?);
        }
        if want_q {
            self.acc(grads, queries, Tensor::new(tq.shape(), dq)?);
        }
        Ok(())
    }
}
