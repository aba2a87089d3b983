//! Eight small curve-shaped splats used as a desk-scale training set.

use std::f64::consts::{PI, TAU};

use crate::gs_model::{clip_scales, normalize, Gaussian, GaussianSplat, SCALE_CLIP};
use crate::math::{self, Vec3};
use crate::Result;

pub const TOY_NAMES: [&str; 8] = [
    "ring",
    "helix",
    "square_frame",
    "axis_cross",
    "trefoil",
    "two_rings",
    "planar_spiral",
    "cube_wireframe",
];

/// Target distance between neighbouring centers after normalization.
pub const TOY_SPACING: f64 = 0.03;

type Curve = Box<dyn Fn(f64) -> Vec3>;

fn segment(a: Vec3, b: Vec3) -> Curve {
    Box::new(move |t| math::add(a, math::scale(math::sub(b, a), t)))
}

fn curves(name: &str) -> Option<Vec<Curve>> {
    let c: Vec<Curve> = match name {
        "ring" => vec![Box::new(|t: f64| [0.8 * (TAU * t).cos(), 0.8 * (TAU * t).sin(), 0.0])],
        "helix" => vec![Box::new(|t: f64| {
            let a = 3.0 * TAU * t;
            [0.45 * a.cos(), 0.45 * a.sin(), -0.8 + 1.6 * t]
        })],
        "square_frame" => {
            let p = [[-0.7, -0.7, 0.0], [0.7, -0.7, 0.0], [0.7, 0.7, 0.0], [-0.7, 0.7, 0.0]];
            (0..4).map(|i| segment(p[i], p[(i + 1) % 4])).collect()
        }
        "axis_cross" => vec![
            segment([-0.8, 0.0, 0.0], [0.8, 0.0, 0.0]),
            segment([0.0, -0.8, 0.0], [0.0, 0.8, 0.0]),
            segment([0.0, 0.0, -0.8], [0.0, 0.0, 0.8]),
        ],
        "trefoil" => vec![Box::new(|t: f64| {
            let a = TAU * t;
            let s = 0.8 / 3.0;
            [
                s * (a.sin() + 2.0 * (2.0 * a).sin()),
                s * (a.cos() - 2.0 * (2.0 * a).cos()),
                -s * (3.0 * a).sin(),
            ]
        })],
        "two_rings" => vec![
            Box::new(|t: f64| [-0.25 + 0.5 * (TAU * t).cos(), 0.5 * (TAU * t).sin(), 0.0]),
            Box::new(|t: f64| [0.25 + 0.5 * (TAU * t).cos(), 0.0, 0.5 * (TAU * t).sin()]),
        ],
        "planar_spiral" => vec![Box::new(|t: f64| {
            let r = 0.12 + 0.68 * t;
            let a = 2.5 * TAU * t;
            [r * a.cos(), r * a.sin(), 0.15 * (PI * t).sin()]
        })],
        "cube_wireframe" => {
            let v = |i: usize| {
                let s = 0.5;
                [
                    if i & 1 == 0 { -s } else { s },
                    if i & 2 == 0 { -s } else { s },
                    if i & 4 == 0 { -s } else { s },
                ]
            };
            let mut edges = Vec::new();
            for i in 0..8usize {
                for bit in [1usize, 2, 4] {
                    if i & bit == 0 {
                        edges.push(segment(v(i), v(i | bit)));
                    }
                }
            }
            edges
        }
        _ => return None,
    };
    Some(c)
}

fn arc_length_samples(f: &Curve, spacing: f64, closed: bool) -> Vec<(Vec3, f64)> {
    const DENSE: usize = 4000;
    let pts: Vec<Vec3> = (0..=DENSE).map(|i| f(i as f64 / DENSE as f64)).collect();
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + math::norm(math::sub(w[1], w[0])));
    }
    let total = *cum.last().unwrap();
    let n = if closed {
        (total / spacing).round().max(1.0) as usize
    } else {
        (total / spacing).round() as usize + 1
    };
    let step = if closed || n == 1 { total / n as f64 } else { total / (n - 1) as f64 };
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let s = k as f64 * step;
        while j + 1 < DENSE && cum[j + 1] < s {
            j += 1;
        }
        let seg = cum[j + 1] - cum[j];
        let f = if seg > 0.0 { ((s - cum[j]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        out.push((math::add(pts[j], math::scale(math::sub(pts[j + 1], pts[j]), f)), s / total));
    }
    out
}

/// Builds the named toy shape, normalized and scale-clipped.
pub fn toy_shape(name: &str) -> Option<Result<GaussianSplat>> {
    let cs = curves(name)?;
    let closed = matches!(name, "ring" | "trefoil" | "two_rings");
    // spacing in raw units that becomes TOY_SPACING once normalized
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for c in &cs {
        for i in 0..=1000 {
            let p = c(i as f64 / 1000.0);
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let spacing = TOY_SPACING * extent / (2.0 * crate::gs_model::NORMALIZED_EXTENT);
    let mut gaussians: Vec<Gaussian> = Vec::new();
    let n_curves = cs.len() as f64;
    for (ci, c) in cs.iter().enumerate() {
        for (p, t) in arc_length_samples(c, spacing, closed) {
            if gaussians.iter().any(|g| math::dist_sq(g.center, p) < 1e-4 * spacing * spacing) {
                continue; // shared segment endpoints
            }
            let u = (ci as f64 + t) / n_curves;
            let half = 0.5 * PI * u;
            gaussians.push(Gaussian {
                center: p,
                rotation: [half.cos(), 0.0, 0.0, half.sin()],
                scale: [0.008, 0.003 + 0.002 * (TAU * u).cos(), 0.004],
                opacity: 0.6 + 0.3 * (TAU * u).cos(),
                color: [
                    0.5 + 0.4 * (TAU * u).sin(),
                    0.5 + 0.4 * (TAU * u + 2.0).sin(),
                    0.5 + 0.4 * (TAU * u + 4.0).sin(),
                ],
            });
        }
    }
    Some(normalize(&GaussianSplat::new(gaussians)).and_then(|s| clip_scales(&s, SCALE_CLIP)))
}

/// All eight shapes in [`TOY_NAMES`] order.
pub fn toy_set() -> Result<Vec<(String, GaussianSplat)>> {
    TOY_NAMES
        .iter()
        .map(|n| Ok((n.to_string(), toy_shape(n).expect("known name")?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_valid_normalized_and_evenly_spaced() {
        for (name, s) in toy_set().unwrap() {
            s.validate(SCALE_CLIP).unwrap();
            assert!(s.count() >= 50 && s.count() <= 800, "{name}: {}", s.count());
            let (lo, hi) = s.bounds().unwrap();
            for k in 0..3 {
                assert!(lo[k] >= -0.9 - 1e-9 && hi[k] <= 0.9 + 1e-9);
            }
            // every center has a neighbour closer than the truncation distance
            let c = s.centers();
            for (i, p) in c.iter().enumerate() {
                let nn = c
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| math::dist_sq(*p, *q).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!(nn < 0.05, "{name}: gap {nn}");
            }
        }
        assert!(toy_shape("nope").is_none());
    }
}
