//! Gaussian splat domain types and preprocessing.
//!
//! A [`Gaussian`] stores activated attributes (unit quaternion, positive
//! scale, opacity and RGB in `[0, 1]`). The covariance `R S Sᵀ Rᵀ` is derived
//! on demand and never stored.

mod ply;

pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyReport, SaveReport, SH_C0};

use serde::{Deserialize, Serialize};

use crate::math::{self, Quat, Vec3};
use crate::{Error, Result};

/// Default upper bound on every scale component.
pub const SCALE_CLIP: f64 = 0.01;

/// Number of scalars per Gaussian: center 3, rotation 4, scale 3, opacity 1, color 3.
pub const GAUSSIAN_DIM: usize = 14;

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub center: Vec3,
    /// Unit quaternion, (w, x, y, z).
    pub rotation: Quat,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

/// Everything about a Gaussian except where it is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    pub color: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
    pub opacity: f64,
}

impl Gaussian {
    pub fn attributes(&self) -> Attributes {
        Attributes {
            color: self.color,
            rotation: self.rotation,
            scale: self.scale,
            opacity: self.opacity,
        }
    }

    pub fn from_parts(center: Vec3, attrs: Attributes) -> Self {
        Self {
            center,
            rotation: attrs.rotation,
            scale: attrs.scale,
            opacity: attrs.opacity,
            color: attrs.color,
        }
    }

    /// Flat 14-vector in (center, rotation, scale, opacity, color) order.
    pub fn to_array(&self) -> [f64; GAUSSIAN_DIM] {
        let mut out = [0.0; GAUSSIAN_DIM];
        out[0..3].copy_from_slice(&self.center);
        out[3..7].copy_from_slice(&self.rotation);
        out[7..10].copy_from_slice(&self.scale);
        out[10] = self.opacity;
        out[11..14].copy_from_slice(&self.color);
        out
    }

    /// Checks the attribute invariants against the given scale bound.
    pub fn validate(&self, scale_clip: f64) -> Result<()> {
        let qn = math::quat_norm(self.rotation);
        if (qn - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("rotation norm {qn} is not 1")));
        }
        for (axis, s) in self.scale.iter().enumerate() {
            if !(*s > 0.0 && *s <= scale_clip) {
                return Err(Error::Data(format!(
                    "scale[{axis}] = {s} outside (0, {scale_clip}]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Data(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Data(format!("color {:?} outside [0, 1]", self.color)));
        }
        Ok(())
    }

    /// Covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> [[f64; 3]; 3] {
        let r = math::quat_to_matrix(self.rotation);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3)
                    .map(|k| r[i][k] * self.scale[k] * self.scale[k] * r[j][k])
                    .sum();
            }
        }
        out
    }

    /// Unnormalized density `exp(-½ (x-σ)ᵀ Σ⁻¹ (x-σ))`.
    ///
    /// Evaluated in the Gaussian's local frame, so Σ is never inverted.
    pub fn density_at(&self, x: Vec3) -> Result<f64> {
        for (axis, s) in self.scale.iter().enumerate() {
            if s.abs() < 1e-12 {
                return Err(Error::Data(format!(
                    "singular covariance: scale along axis {axis} is {s}"
                )));
            }
        }
        let r = math::quat_to_matrix(self.rotation);
        let local = math::mat_t_vec(&r, math::sub(x, self.center));
        let m: f64 = (0..3).map(|k| (local[k] / self.scale[k]).powi(2)).sum();
        Ok((-0.5 * m).exp())
    }
}

/// Maps original coordinates into the normalized frame: `y = (x + translation) * uniform_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub translation: Vec3,
    pub uniform_scale: f64,
}

impl Default for NormalizationTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl NormalizationTransform {
    pub const IDENTITY: Self = Self {
        translation: [0.0; 3],
        uniform_scale: 1.0,
    };

    pub fn apply(&self, x: Vec3) -> Vec3 {
        math::scale(math::add(x, self.translation), self.uniform_scale)
    }

    pub fn invert(&self, y: Vec3) -> Vec3 {
        math::sub(math::scale(y, 1.0 / self.uniform_scale), self.translation)
    }

    /// Transform equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &Self) -> Self {
        Self {
            translation: math::add(
                self.translation,
                math::scale(next.translation, 1.0 / self.uniform_scale),
            ),
            uniform_scale: self.uniform_scale * next.uniform_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianSplat {
    pub gaussians: Vec<Gaussian>,
    /// Transform from the original capture frame into the current frame.
    pub frame: NormalizationTransform,
}

/// Half-width of the box that [`normalize`] fits centers into.
pub const NORMALIZED_EXTENT: f64 = 0.9;

impl GaussianSplat {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self {
            gaussians,
            frame: NormalizationTransform::IDENTITY,
        }
    }

    pub fn count(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.gaussians.iter().map(|g| g.center).collect()
    }

    /// Axis-aligned bounding box of the centers, `None` when empty.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.gaussians.first()?.center;
        let mut lo = first;
        let mut hi = first;
        for g in &self.gaussians {
            for k in 0..3 {
                lo[k] = lo[k].min(g.center[k]);
                hi[k] = hi[k].max(g.center[k]);
            }
        }
        Some((lo, hi))
    }

    pub fn validate(&self, scale_clip: f64) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate(scale_clip)
                .map_err(|e| Error::Data(format!("gaussian {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Centers the bounding box at the origin and scales it uniformly so its
/// longest side spans `[-0.9, 0.9]`. Scales are multiplied by the same factor.
pub fn normalize(splat: &GaussianSplat) -> Result<GaussianSplat> {
    let (lo, hi) = splat
        .bounds()
        .ok_or_else(|| Error::Invalid("cannot normalize an empty splat".into()))?;
    let mid = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let step = NormalizationTransform {
        translation: math::scale(mid, -1.0),
        uniform_scale: if extent > 0.0 {
            2.0 * NORMALIZED_EXTENT / extent
        } else {
            1.0
        },
    };
    let gaussians = splat
        .gaussians
        .iter()
        .map(|g| Gaussian {
            center: step.apply(g.center),
            scale: math::scale(g.scale, step.uniform_scale),
            ..*g
        })
        .collect();
    Ok(GaussianSplat {
        gaussians,
        frame: splat.frame.then(&step),
    })
}

/// Caps every scale component at `max_scale`.
pub fn clip_scales(splat: &GaussianSplat, max_scale: f64) -> Result<GaussianSplat> {
    if !(max_scale > 0.0) {
        return Err(Error::Invalid(format!("max_scale must be > 0, got {max_scale}")));
    }
    let mut out = splat.clone();
    for g in &mut out.gaussians {
        for s in &mut g.scale {
            *s = s.min(max_scale);
        }
    }
    Ok(out)
}

/// Clamps colors and opacities into `[0, 1]`.
pub fn clamp_appearance(splat: &GaussianSplat) -> GaussianSplat {
    let mut out = splat.clone();
    for g in &mut out.gaussians {
        g.opacity = g.opacity.clamp(0.0, 1.0);
        for c in &mut g.color {
            *c = c.clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g_at(center: Vec3) -> Gaussian {
        Gaussian {
            center,
            rotation: IDENTITY_QUAT,
            scale: [0.005; 3],
            opacity: 0.5,
            color: [0.5; 3],
        }
    }

    #[test]
    fn normalize_two_points() {
        let s = GaussianSplat::new(vec![g_at([0.0, 0.0, 0.0]), g_at([2.0, 0.0, 0.0])]);
        let n = normalize(&s).unwrap();
        assert!((n.frame.uniform_scale - 0.9).abs() < 1e-12);
        assert!((n.gaussians[0].center[0] + 0.9).abs() < 1e-12);
        assert!((n.gaussians[1].center[0] - 0.9).abs() < 1e-12);
        assert_eq!(n.gaussians[0].center[1], 0.0);
        assert!((n.gaussians[0].scale[0] - 0.0045).abs() < 1e-15);
    }

    #[test]
    fn normalize_degenerate_box_moves_to_origin() {
        let s = GaussianSplat::new(vec![g_at([5.0, 5.0, 5.0])]);
        let n = normalize(&s).unwrap();
        assert_eq!(n.gaussians[0].center, [0.0; 3]);
        assert_eq!(n.frame.uniform_scale, 1.0);
    }

    #[test]
    fn normalize_near_identity_when_already_centered() {
        let s = GaussianSplat::new(vec![g_at([-0.9, -0.2, 0.1]), g_at([0.9, 0.2, -0.1])]);
        let n = normalize(&s).unwrap();
        assert!((n.frame.uniform_scale - 1.0).abs() < 1e-12);
        assert!(n.frame.translation.iter().all(|t| t.abs() < 1e-12));
    }

    #[test]
    fn normalize_rejects_empty() {
        assert!(normalize(&GaussianSplat::default()).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = g_at([0.0; 3]);
        g.scale = [0.5, 0.001, 0.02];
        let s = GaussianSplat::new(vec![g]);
        let c = clip_scales(&s, 0.01).unwrap();
        assert_eq!(c.gaussians[0].scale, [0.01, 0.001, 0.01]);

        g.scale = [0.015; 3];
        let c = clip_scales(&GaussianSplat::new(vec![g]), 0.02).unwrap();
        assert_eq!(c.gaussians[0].scale, [0.015; 3]);

        let small = GaussianSplat::new(vec![g_at([0.0; 3])]);
        assert_eq!(clip_scales(&small, 0.01).unwrap(), small);
        assert!(clip_scales(&small, 0.0).is_err());
    }

    #[test]
    fn density_examples() {
        let g = g_at([0.1, 0.2, 0.3]);
        assert_eq!(g.density_at(g.center).unwrap(), 1.0);
        let x = [0.1 + 0.005, 0.2, 0.3];
        assert!((g.density_at(x).unwrap() - (-0.5f64).exp()).abs() < 1e-12);

        let mut flat = g;
        flat.scale[2] = 0.0;
        let err = flat.density_at(x).unwrap_err().to_string();
        assert!(err.contains("axis 2"), "{err}");
    }

    #[test]
    fn frame_inverts() {
        let s = GaussianSplat::new(vec![g_at([1.0, -3.0, 2.0]), g_at([4.0, 0.5, -1.0])]);
        let n = normalize(&s).unwrap();
        for (orig, norm) in s.gaussians.iter().zip(&n.gaussians) {
            let back = n.frame.invert(norm.center);
            for k in 0..3 {
                assert!((back[k] - orig.center[k]).abs() < 1e-9);
            }
        }
    }

    fn arb_splat() -> impl Strategy<Value = GaussianSplat> {
        prop::collection::vec(
            (
                prop::array::uniform3(-50.0f64..50.0),
                prop::array::uniform3(1e-4f64..0.5),
            ),
            1..40,
        )
        .prop_map(|v| {
            GaussianSplat::new(
                v.into_iter()
                    .map(|(c, s)| Gaussian {
                        scale: s,
                        ..g_at(c)
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in arb_splat()) {
            let once = normalize(&s).unwrap();
            let twice = normalize(&once).unwrap();
            let (lo, hi) = once.bounds().unwrap();
            prop_assert!(lo.iter().chain(hi.iter()).all(|v| v.abs() <= 0.9 + 1e-9));
            for (a, b) in once.gaussians.iter().zip(&twice.gaussians) {
                for k in 0..3 {
                    prop_assert!((a.center[k] - b.center[k]).abs() < 1e-6);
                }
            }
            // Composed frame maps original centers onto the twice-normalized ones.
            for (o, t) in s.gaussians.iter().zip(&twice.gaussians) {
                let y = twice.frame.apply(o.center);
                for k in 0..3 {
                    prop_assert!((y[k] - t.center[k]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn clip_is_monotone_and_idempotent(s in arb_splat(), m in 1e-3f64..0.3) {
            let c = clip_scales(&s, m).unwrap();
            prop_assert_eq!(&clip_scales(&c, m).unwrap(), &c);
            for (a, b) in s.gaussians.iter().zip(&c.gaussians) {
                for k in 0..3 {
                    prop_assert!(b.scale[k] <= a.scale[k] && b.scale[k] <= m);
                }
            }
        }

        #[test]
        fn density_is_rotation_consistent(
            q in prop::array::uniform4(-1.0f64..1.0),
            p in prop::array::uniform4(-1.0f64..1.0),
            d in prop::array::uniform3(-0.02f64..0.02),
        ) {
            let qn = math::quat_norm(q);
            let pn = math::quat_norm(p);
            prop_assume!(qn > 0.1 && pn > 0.1);
            let q = [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn];
            let p = [p[0] / pn, p[1] / pn, p[2] / pn, p[3] / pn];
            let g = Gaussian { rotation: q, scale: [0.004, 0.009, 0.006], ..g_at([0.1, -0.2, 0.3]) };
            let rotated = Gaussian { rotation: math::quat_mul(p, q), ..g };
            let rp = math::quat_to_matrix(p);
            let x = math::add(g.center, d);
            let xr = math::add(g.center, math::mat_vec(&rp, d));
            let a = g.density_at(x).unwrap();
            let b = rotated.density_at(xr).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
