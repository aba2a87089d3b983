use rand::Rng;

use crate::math::Vec3;
use crate::numeric::{grid_coord, Tensor, PLANE_AXES};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriplaneShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Default for TriplaneShape {
    fn default() -> Self {
        Self { h: 32, w: 32, c: 16 }
    }
}

impl TriplaneShape {
    pub fn len(&self) -> usize {
        3 * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.c
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 2 || self.w < 2 || self.c == 0 {
            return Err(Error::Invalid(format!(
                "triplane needs h, w >= 2 and c >= 1, got {}x{}x{}",
                self.h, self.w, self.c
            )));
        }
        Ok(())
    }
}

/// Three feature planes (XY, XZ, YZ) stored as `[plane][row][col][channel]`.
/// Grid nodes sit at both ends of [-1,1] on each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane {
    pub shape: TriplaneShape,
    pub planes: Tensor,
}

struct Corners {
    idx: [usize; 4],
    fx: f64,
    fy: f64,
    clamped: (bool, bool),
}

impl Triplane {
    pub fn new(shape: TriplaneShape, planes: Tensor) -> Result<Self> {
        shape.validate()?;
        if planes.len() != shape.len() {
            return Err(Error::shape("triplane", planes.shape(), &[3, shape.h, shape.w, shape.c]));
        }
        let planes = planes.reshape(&[3, shape.h, shape.w, shape.c])?;
        Ok(Self { shape, planes })
    }

    pub fn constant(shape: TriplaneShape, v: f64) -> Self {
        Self::new(shape, Tensor::full(&[shape.len()], v)).expect("shape validated by caller")
    }

    pub fn random(shape: TriplaneShape, std: f64, rng: &mut impl Rng) -> Self {
        Self::new(shape, Tensor::randn(&[shape.len()], std, rng)).expect("shape validated by caller")
    }

    fn corners(&self, q: Vec3, p: usize) -> Corners {
        let TriplaneShape { h, w, c } = self.shape;
        let (a0, a1) = PLANE_AXES[p];
        let (ix, fx, cx) = grid_coord(q[a0], w);
        let (iy, fy, cy) = grid_coord(q[a1], h);
        let base = p * h * w * c;
        let i00 = base + (iy * w + ix) * c;
        let i01 = base + ((iy + 1) * w + ix) * c;
        Corners {
            idx: [i00, i00 + c, i01, i01 + c],
            fx,
            fy,
            clamped: (cx, cy),
        }
    }

    /// Writes the 3C feature of `q` into `out`. Returns true when `q` had to
    /// be clamped into the domain.
    pub fn interpolate_into(&self, q: Vec3, out: &mut [f64]) -> bool {
        let c = self.shape.c;
        let pd = self.planes.data();
        let mut clamped = false;
        for p in 0..3 {
            let k = self.corners(q, p);
            clamped |= k.clamped.0 || k.clamped.1;
            let wts = [
                (1.0 - k.fx) * (1.0 - k.fy),
                k.fx * (1.0 - k.fy),
                (1.0 - k.fx) * k.fy,
                k.fx * k.fy,
            ];
            let o = &mut out[p * c..(p + 1) * c];
            o.iter_mut().for_each(|v| *v = 0.0);
            for (idx, wgt) in k.idx.iter().zip(wts) {
                for (acc, v) in o.iter_mut().zip(&pd[*idx..*idx + c]) {
                    *acc += wgt * v;
                }
            }
        }
        clamped
    }

    pub fn interpolate(&self, q: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.feature_dim()];
        self.interpolate_into(q, &mut out);
        out
    }

    /// Features for a batch as a B×3C tensor plus the number of clamped points.
    pub fn interpolate_batch(&self, qs: &[Vec3]) -> (Tensor, usize) {
        let d = self.shape.feature_dim();
        let mut data = vec![0.0; qs.len() * d];
        let mut clamped = 0;
        for (q, out) in qs.iter().zip(data.chunks_exact_mut(d)) {
            clamped += self.interpolate_into(*q, out) as usize;
        }
        (Tensor::new(&[qs.len(), d], data).unwrap(), clamped)
    }

    /// `g · ∂feature/∂q` for a cotangent `g` over the 3C features. Clamped
    /// coordinates contribute zero.
    pub fn feature_vjp(&self, q: Vec3, g: &[f64]) -> Vec3 {
        let TriplaneShape { h, w, c } = self.shape;
        let pd = self.planes.data();
        let mut dq = [0.0; 3];
        for p in 0..3 {
            let (a0, a1) = PLANE_AXES[p];
            let k = self.corners(q, p);
            let [i00, i10, i01, i11] = k.idx;
            let go = &g[p * c..(p + 1) * c];
            let (mut du, mut dv) = (0.0, 0.0);
            for ch in 0..c {
                let (v00, v10, v01, v11) = (pd[i00 + ch], pd[i10 + ch], pd[i01 + ch], pd[i11 + ch]);
                du += go[ch] * ((1.0 - k.fy) * (v10 - v00) + k.fy * (v11 - v01));
                dv += go[ch] * ((1.0 - k.fx) * (v01 - v00) + k.fx * (v11 - v10));
            }
            if !k.clamped.0 {
                dq[a0] += du * 0.5 * (w - 1) as f64;
            }
            if !k.clamped.1 {
                dq[a1] += dv * 0.5 * (h - 1) as f64;
            }
        }
        dq
    }

    /// World coordinate of grid node `i` on an axis with `n` nodes.
    pub fn node_coord(i: usize, n: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}
