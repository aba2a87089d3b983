use rand::Rng;

use crate::gs_model::GaussianSplat;
use crate::{rng, Error, Result};

/// Relative jitter of the split point per axis, as a fraction of the extent.
const JITTER: f64 = 0.25;

/// Splits Gaussian indices into 8 octant chunks around the bounding-box
/// center shifted by a seeded jitter. Chunk `k` holds Gaussians with
/// `x ≥ sx` in bit 0, `y ≥ sy` in bit 1 and `z ≥ sz` in bit 2.
pub fn partition_octants(splat: &GaussianSplat, seed: u64) -> Result<Vec<Vec<usize>>> {
    let (lo, hi) = splat
        .bounds()
        .ok_or_else(|| Error::Invalid("cannot partition an empty splat".into()))?;
    let mut r = rng::rng(rng::derive_seed(seed, "octants"));
    let split: [f64; 3] =
        std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]) + r.random_range(-JITTER..=JITTER) * (hi[a] - lo[a]));
    let mut chunks = vec![Vec::new(); 8];
    for (i, g) in splat.gaussians.iter().enumerate() {
        let k = (0..3).filter(|&a| g.center[a] >= split[a]).fold(0, |k, a| k | (1 << a));
        chunks[k].push(i);
    }
    Ok(chunks)
}

/// One octant chunk of `splat`. An empty draw is replaced by a uniform draw
/// among the non-empty chunks.
pub fn make_partial(splat: &GaussianSplat, seed: u64) -> Result<GaussianSplat> {
    if splat.count() < 8 {
        return Err(Error::Invalid(format!(
            "make_partial needs at least 8 Gaussians, got {}",
            splat.count()
        )));
    }
    let chunks = partition_octants(splat, seed)?;
    let mut r = rng::rng(rng::derive_seed(seed, "chunk"));
    let mut k = r.random_range(0..8);
    if chunks[k].is_empty() {
        let live: Vec<usize> = (0..8).filter(|&i| !chunks[i].is_empty()).collect();
        k = live[r.random_range(0..live.len())];
    }
    Ok(GaussianSplat::new(chunks[k].iter().map(|&i| splat.gaussians[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gs_model::Gaussian;

    fn uniform(n: usize, seed: u64) -> GaussianSplat {
        let mut r = rng::rng(seed);
        GaussianSplat::new(
            (0..n)
                .map(|_| Gaussian {
                    center: std::array::from_fn(|_| r.random_range(-0.9..0.9)),
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    scale: [0.005; 3],
                    opacity: 0.5,
                    color: [0.5; 3],
                })
                .collect(),
        )
    }

    #[test]
    fn chunks_partition_the_splat() {
        let s = uniform(500, 1);
        for seed in 0..20 {
            let chunks = partition_octants(&s, seed).unwrap();
            let mut all: Vec<usize> = chunks.concat();
            all.sort_unstable();
            assert_eq!(all, (0..500).collect::<Vec<_>>());
            let p = make_partial(&s, seed).unwrap();
            assert!(p.count() > 0);
            assert!(p.gaussians.iter().all(|g| s.gaussians.contains(g)));
        }
    }

    #[test]
    fn retained_fraction_is_an_eighth() {
        let s = uniform(400, 2);
        let mean = (0..1000).map(|seed| make_partial(&s, seed).unwrap().count() as f64 / 400.0).sum::<f64>() / 1000.0;
        assert!((mean - 0.125).abs() < 0.03, "{mean}");
    }

    #[test]
    fn too_small_or_degenerate() {
        assert!(make_partial(&uniform(7, 3), 0).is_err());
        // all centers equal: one non-empty chunk, always chosen
        let mut s = uniform(10, 4);
        s.gaussians.iter_mut().for_each(|g| g.center = [0.1; 3]);
        assert_eq!(make_partial(&s, 5).unwrap().count(), 10);
    }
}
