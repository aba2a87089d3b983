//! Fixtures shared by the benchmarks.

use gsfield_core::field::{FieldHeads, HeadConfig, NeuralField, Triplane, TriplaneShape};
use gsfield_core::gs_model::GaussianSplat;
use gsfield_core::math::Vec3;
use gsfield_core::numeric::Tensor;
use gsfield_core::rng;
use rand::Rng;

pub fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng::rng(seed);
    (0..n)
        .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect()
}

/// Untrained field with the default triplane and head sizes and
/// non-degenerate weights.
pub fn random_field(seed: u64) -> NeuralField {
    let mut r = rng::rng(seed);
    let shape = TriplaneShape::default();
    let mut heads = FieldHeads::new(shape.feature_dim(), HeadConfig::default(), &mut r).expect("valid head config");
    for t in heads.store.tensors_mut() {
        let std = if t.shape().len() == 2 { 1.0 / (t.shape()[0] as f64).sqrt() } else { 0.1 };
        *t = Tensor::randn(t.shape(), std, &mut r);
    }
    NeuralField::new(Triplane::random(shape, 0.5, &mut r), heads).expect("matching widths")
}

pub fn ring() -> GaussianSplat {
    gsfield_core::toy::toy_shape("ring").expect("built-in shape").expect("valid shape")
}
