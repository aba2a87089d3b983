use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{attr_gt, build_index, gaupf_gt, TruncationConfig};
use crate::gs_model::{Attributes, GaussianSplat};
use crate::io::ByteReader;
use crate::math::{clamp_unit_cube, Vec3};
use crate::{rng, Error, Result};

const MAGIC: &[u8; 4] = b"GSFS";
const VERSION: u32 = 1;

/// Labeled training queries for the probability, color and transform fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldSampleSet {
    pub queries: Vec<Vec3>,
    pub prob_labels: Vec<f64>,
    pub attr_labels: Vec<Attributes>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub n_near: usize,
    pub n_uniform: usize,
    /// Standard deviation of the isotropic perturbation around centers.
    pub near_sigma: f64,
    pub truncation: TruncationConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_near: 16_000,
            n_uniform: 4000,
            near_sigma: 0.0125,
            truncation: TruncationConfig::default(),
        }
    }
}

impl FieldSampleSet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Labels `queries` against a splat.
    pub fn label(splat: &GaussianSplat, queries: Vec<Vec3>, cfg: &TruncationConfig) -> Result<Self> {
        let index = build_index(splat)?;
        let prob_labels = queries.iter().map(|q| gaupf_gt(&index, *q, cfg)).collect();
        let attr_labels = queries.iter().map(|q| attr_gt(&index, splat, *q)).collect();
        Ok(Self {
            queries,
            prob_labels,
            attr_labels,
        })
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            queries: idx.iter().map(|&i| self.queries[i]).collect(),
            prob_labels: idx.iter().map(|&i| self.prob_labels[i]).collect(),
            attr_labels: idx.iter().map(|&i| self.attr_labels[i]).collect(),
        }
    }

    /// Header (magic, version, M) followed by packed little-endian f64 arrays:
    /// queries 3M, prob M, color 3M, rotation 4M, scale 3M, opacity M.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.len();
        let mut out = Vec::with_capacity(16 + m * 15 * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        self.queries.iter().flatten().for_each(|v| put(*v));
        self.prob_labels.iter().for_each(|v| put(*v));
        self.attr_labels.iter().flat_map(|a| a.color).for_each(&mut put);
        self.attr_labels.iter().flat_map(|a| a.rotation).for_each(&mut put);
        self.attr_labels.iter().flat_map(|a| a.scale).for_each(&mut put);
        self.attr_labels.iter().for_each(|a| put(a.opacity));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a field sample file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported sample file version {version}")));
        }
        let m = usize::try_from(r.u64()?).map_err(|_| Error::Format("sample count overflow".into()))?;
        let q = r.f64_vec(3 * m)?;
        let p = r.f64_vec(m)?;
        let c = r.f64_vec(3 * m)?;
        let rot = r.f64_vec(4 * m)?;
        let s = r.f64_vec(3 * m)?;
        let o = r.f64_vec(m)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after sample arrays".into()));
        }
        let set = Self {
            queries: q.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect(),
            prob_labels: p,
            attr_labels: (0..m)
                .map(|i| Attributes {
                    color: [c[3 * i], c[3 * i + 1], c[3 * i + 2]],
                    rotation: [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]],
                    scale: [s[3 * i], s[3 * i + 1], s[3 * i + 2]],
                    opacity: o[i],
                })
                .collect(),
        };
        if let Some(i) = set.prob_labels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data(format!("probability label {i} outside [0, 1]")));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Draws `n_near` centers perturbed by N(0, near_sigma²) and `n_uniform`
/// points uniform in `[-1, 1]³`, then labels them. Near queries are clamped
/// to the unit cube.
pub fn sample_training_queries(
    splat: &GaussianSplat,
    n_near: usize,
    n_uniform: usize,
    near_sigma: f64,
    seed: u64,
    cfg: &TruncationConfig,
) -> Result<FieldSampleSet> {
    if !(near_sigma > 0.0) {
        return Err(Error::Invalid(format!("near_sigma must be > 0, got {near_sigma}")));
    }
    if n_near + n_uniform == 0 {
        return Ok(FieldSampleSet::default());
    }
    if splat.is_empty() {
        return Err(Error::Invalid("cannot sample around an empty splat".into()));
    }
    let mut r = rng::rng(seed);
    let normal = Normal::new(0.0, near_sigma).expect("sigma checked positive");
    let mut queries = Vec::with_capacity(n_near + n_uniform);
    for _ in 0..n_near {
        let c = splat.gaussians[r.random_range(0..splat.count())].center;
        let q = [
            c[0] + normal.sample(&mut r),
            c[1] + normal.sample(&mut r),
            c[2] + normal.sample(&mut r),
        ];
        queries.push(clamp_unit_cube(q));
    }
    for _ in 0..n_uniform {
        queries.push([
            r.random_range(-1.0..=1.0),
            r.random_range(-1.0..=1.0),
            r.random_range(-1.0..=1.0),
        ]);
    }
    FieldSampleSet::label(splat, queries, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gs_model::{Gaussian, IDENTITY_QUAT};

    fn sparse_splat() -> GaussianSplat {
        GaussianSplat::new(
            (0..5)
                .map(|i| Gaussian {
                    center: [-0.6 + 0.3 * i as f64, 0.1, -0.2],
                    rotation: IDENTITY_QUAT,
                    scale: [0.004; 3],
                    opacity: 0.8,
                    color: [0.1 * i as f64, 0.5, 0.5],
                })
                .collect(),
        )
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = TruncationConfig::default();
        let a = sample_training_queries(&sparse_splat(), 100, 50, 0.02, 3, &cfg).unwrap();
        let b = sample_training_queries(&sparse_splat(), 100, 50, 0.02, 3, &cfg).unwrap();
        assert_eq!(a, b);
        let c = sample_training_queries(&sparse_splat(), 100, 50, 0.02, 4, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_only_is_mostly_empty_space() {
        let cfg = TruncationConfig::default();
        let s = sample_training_queries(&sparse_splat(), 0, 2000, 0.02, 1, &cfg).unwrap();
        assert_eq!(s.len(), 2000);
        let mean: f64 = s.prob_labels.iter().sum::<f64>() / 2000.0;
        assert!(mean < 0.01, "{mean}");
        assert!(s.queries.iter().flatten().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn tight_near_samples_score_high() {
        let cfg = TruncationConfig::default();
        let s = sample_training_queries(&sparse_splat(), 1000, 0, 0.01, 9, &cfg).unwrap();
        let frac = s.prob_labels.iter().filter(|p| **p > 0.5).count() as f64 / 1000.0;
        // A label exceeds 0.5 when the offset norm is below 2.5 sigma. The norm
        // of an isotropic 3-D normal follows the chi distribution with 3 dof.
        let r: f64 = 2.5;
        let erf = 0.987_580_669_348_448; // erf(2.5 / sqrt 2)
        let p = erf - (2.0 / std::f64::consts::PI).sqrt() * r * (-r * r / 2.0).exp();
        let se = (p * (1.0 - p) / 1000.0).sqrt();
        assert!(frac >= p - 3.0 * se, "{frac} vs {p}");
    }

    #[test]
    fn zero_counts_give_empty_set() {
        let cfg = TruncationConfig::default();
        assert!(sample_training_queries(&sparse_splat(), 0, 0, 0.02, 1, &cfg)
            .unwrap()
            .is_empty());
        assert!(sample_training_queries(&sparse_splat(), 1, 0, 0.0, 1, &cfg).is_err());
    }

    #[test]
    fn blob_round_trip_and_corruption() {
        let cfg = TruncationConfig::default();
        let s = sample_training_queries(&sparse_splat(), 40, 10, 0.02, 2, &cfg).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(FieldSampleSet::from_bytes(&bytes).unwrap(), s);
        assert!(FieldSampleSet::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FieldSampleSet::from_bytes(&bad), Err(Error::Format(_))));
    }
}
