//! Geometry- and field-space error measures.

use serde::{Deserialize, Serialize};

use crate::field_api::GaussianField;
use crate::gs_model::GaussianSplat;
use crate::gt_functions::{sample_training_queries, KdTree, SamplingConfig, SpatialIndex};
use crate::math::{quat_dot, Vec3};
use crate::{Error, Result};

/// Symmetric mean nearest-neighbour distance (L2, not squared), halved.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid(format!(
            "chamfer needs two non-empty sets, got {} and {} points",
            a.len(),
            b.len()
        )));
    }
    let one_way = |from: &[Vec3], to: &[Vec3]| {
        let tree = KdTree::new(to.to_vec());
        from.iter()
            .map(|p| tree.nearest(*p).expect("non-empty").1.sqrt())
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

/// Mean |ψ_pf(q) − GauPF(q)| over a seeded query sample drawn with the
/// training mix.
pub fn field_l1(
    field: &dyn GaussianField,
    splat: &GaussianSplat,
    sampling: &SamplingConfig,
    n_queries: usize,
    seed: u64,
) -> Result<f64> {
    let total = sampling.n_near + sampling.n_uniform;
    if total == 0 || n_queries == 0 {
        return Err(Error::Invalid("field_l1 needs a positive query count".into()));
    }
    let n_near = (n_queries as f64 * sampling.n_near as f64 / total as f64).round() as usize;
    let set = sample_training_queries(
        splat,
        n_near,
        n_queries - n_near,
        sampling.near_sigma,
        seed,
        &sampling.truncation,
    )?;
    let p = field.probability(&set.queries);
    Ok(p.iter()
        .zip(&set.prob_labels)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / p.len() as f64)
}

/// Mean absolute error per attribute group at ground-truth centers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttrErrors {
    pub color: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
}

/// Per-component mean L1 at every center; the quaternion is compared after
/// aligning signs.
pub fn attr_error(field: &dyn GaussianField, splat: &GaussianSplat) -> Result<AttrErrors> {
    if splat.is_empty() {
        return Err(Error::Invalid("attr_error needs a non-empty splat".into()));
    }
    let pred = field.attributes(&splat.centers());
    let mut e = AttrErrors::default();
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    for (p, g) in pred.iter().zip(&splat.gaussians) {
        e.color += l1(&p.color, &g.color);
        let s = if quat_dot(p.rotation, g.rotation) < 0.0 { -1.0 } else { 1.0 };
        e.rotation += l1(&p.rotation.map(|v| v * s), &g.rotation);
        e.scale += l1(&p.scale, &g.scale);
        e.opacity += (p.opacity - g.opacity).abs();
    }
    let n = splat.count() as f64;
    e.color /= n;
    e.rotation /= n;
    e.scale /= n;
    e.opacity /= n;
    Ok(e)
}

/// Summary written by the `metrics` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Chamfer distance between extracted and reference centers, when an
    /// extracted splat was supplied.
    pub chamfer: Option<f64>,
    pub field_l1_prob: Option<f64>,
    pub attr_errors: Option<AttrErrors>,
    pub reference_count: usize,
    pub candidate_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds: Option<f64>,
}

impl MetricReport {
    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        self.chamfer.is_none_or(ok)
            && self.field_l1_prob.is_none_or(ok)
            && self
                .attr_errors
                .is_none_or(|a| ok(a.color) && ok(a.rotation) && ok(a.scale) && ok(a.opacity))
            && self.seconds.is_none_or(ok)
    }
}

/// Chamfer of a splat's centers against an index's centers.
pub fn chamfer_to_index(splat: &GaussianSplat, index: &SpatialIndex) -> Result<f64> {
    chamfer(&splat.centers(), index.centers())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gs_model::{Gaussian, IDENTITY_QUAT};
    use crate::gt_functions::{GroundTruthField, TruncationConfig};
    use crate::math::dist_sq;
    use crate::{rng, Attributes};
    use rand::Rng;

    fn random_points(r: &mut impl Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![[0.0; 3]];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!((chamfer(&a, &[[0.1, 0.0, 0.0]]).unwrap() - 0.1).abs() < 1e-15);
        assert!(chamfer(&a, &[]).is_err());
    }

    #[test]
    fn chamfer_matches_double_loop() {
        let mut r = rng::rng(1);
        let a = random_points(&mut r, 1000);
        let b = random_points(&mut r, 700);
        let brute = |x: &[Vec3], y: &[Vec3]| {
            x.iter()
                .map(|p| y.iter().map(|q| dist_sq(*p, *q)).fold(f64::INFINITY, f64::min).sqrt())
                .sum::<f64>()
                / x.len() as f64
        };
        let expect = 0.5 * (brute(&a, &b) + brute(&b, &a));
        let got = chamfer(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9);
        assert!((chamfer(&b, &a).unwrap() - got).abs() < 1e-12);
        let mut shuffled = a.clone();
        shuffled.reverse();
        assert!((chamfer(&shuffled, &b).unwrap() - got).abs() < 1e-12);
    }

    struct Constant(f64);

    impl GaussianField for Constant {
        fn probability(&self, p: &[Vec3]) -> Vec<f64> {
            vec![self.0; p.len()]
        }
        fn probability_and_gradient(&self, p: &[Vec3]) -> Vec<(f64, Vec3)> {
            vec![(self.0, [0.0; 3]); p.len()]
        }
        fn attributes(&self, p: &[Vec3]) -> Vec<Attributes> {
            vec![
                Attributes {
                    color: [0.5; 3],
                    rotation: [-1.0, 0.0, 0.0, 0.0],
                    scale: [0.005; 3],
                    opacity: 0.5,
                };
                p.len()
            ]
        }
    }

    fn splat() -> GaussianSplat {
        GaussianSplat::new(vec![
            Gaussian {
                center: [0.0; 3],
                rotation: IDENTITY_QUAT,
                scale: [0.005; 3],
                opacity: 0.5,
                color: [0.5; 3],
            };
            1
        ])
    }

    #[test]
    fn oracle_field_has_zero_error() {
        let s = splat();
        let gt = GroundTruthField::new(s.clone(), TruncationConfig::default()).unwrap();
        let cfg = SamplingConfig::default();
        assert_eq!(field_l1(&gt, &s, &cfg, 500, 3).unwrap(), 0.0);
        assert_eq!(attr_error(&gt, &s).unwrap(), AttrErrors::default());
        // −q is the same rotation
        assert_eq!(attr_error(&Constant(0.0), &s).unwrap(), AttrErrors::default());
    }

    #[test]
    fn constant_half_field_far_from_centers() {
        let s = splat();
        let cfg = SamplingConfig {
            n_near: 0,
            n_uniform: 1,
            ..Default::default()
        };
        // uniform queries almost never fall inside the 0.05 band around one center
        let v = field_l1(&Constant(0.5), &s, &cfg, 2000, 1).unwrap();
        assert!((v - 0.5).abs() < 1e-3, "{v}");
        assert_eq!(v, field_l1(&Constant(0.5), &s, &cfg, 2000, 1).unwrap());
    }
}
