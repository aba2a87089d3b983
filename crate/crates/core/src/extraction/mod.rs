//! Discretizing a field into a splat: octree search, proxy allocation,
//! gradient-ascent refinement and attribute lookup.

pub mod octree;

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field_api::GaussianField;
use crate::gs_model::{Gaussian, GaussianSplat};
use crate::math::{clamp_unit_cube, Vec3};
use crate::{rng, Error, Result};

pub use octree::{octree_dense, octree_sample, pruning_misses, Cell, CellSet, DepthStats, OctreeConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProxyPoints {
    pub positions: Vec<Vec3>,
    pub probabilities: Vec<f64>,
}

impl ProxyPoints {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn mean_probability(&self) -> f64 {
        self.probabilities.iter().sum::<f64>() / self.len().max(1) as f64
    }
}

/// Number of points per cell, proportional to score × volume. Each cell
/// gets the floor of its quota; the leftover points go to cells picked by
/// seeded systematic sampling over the fractional remainders, so a cell
/// receives at most one extra point and every cell keeps its expected
/// share even when `n` is far below the number of cells.
pub fn allocation(cells: &[Cell], n: usize, seed: u64) -> Vec<usize> {
    let w: Vec<f64> = cells.iter().map(|c| (c.score * c.volume()).max(0.0)).collect();
    let total: f64 = w.iter().sum();
    let quotas: Vec<f64> = if total > 0.0 && total.is_finite() {
        w.iter().map(|v| n as f64 * v / total).collect()
    } else {
        vec![n as f64 / cells.len() as f64; cells.len()]
    };
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let left = n.saturating_sub(counts.iter().sum());
    if left == 0 {
        return counts;
    }
    let rem: Vec<f64> = quotas.iter().map(|q| q - q.floor()).collect();
    let scale = left as f64 / rem.iter().sum::<f64>();
    let u: f64 = rng::rng(rng::derive_seed(seed, "allocation")).random();
    let (mut acc, mut next, mut given) = (0.0, u, 0);
    for (c, r) in counts.iter_mut().zip(&rem) {
        acc += r * scale;
        if given < left && acc > next {
            *c += 1;
            given += 1;
            next += 1.0;
        }
    }
    // rounding in the running sum can leave the last pick unplaced
    for (i, r) in rem.iter().enumerate().rev() {
        if given == left {
            break;
        }
        if *r > 0.0 && counts[i] == quotas[i].floor() as usize {
            counts[i] += 1;
            given += 1;
        }
    }
    counts
}

/// Places exactly `n` points uniformly inside the cells according to
/// [`allocation`]. Probabilities are left empty until evaluated.
pub fn allocate_proxies(cells: &CellSet, n: usize, seed: u64) -> Result<ProxyPoints> {
    if cells.is_empty() {
        return Err(Error::Invalid("cannot allocate proxies in an empty cell set".into()));
    }
    let counts = allocation(&cells.cells, n, seed);
    let mut r = rng::rng(rng::derive_seed(seed, "allocate_proxies"));
    let mut positions = Vec::with_capacity(n);
    for (cell, k) in cells.cells.iter().zip(counts) {
        let h = cell.half_extent;
        for _ in 0..k {
            positions.push(clamp_unit_cube([
                cell.center[0] + r.random_range(-h..=h),
                cell.center[1] + r.random_range(-h..=h),
                cell.center[2] + r.random_range(-h..=h),
            ]));
        }
    }
    Ok(ProxyPoints {
        positions,
        probabilities: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub steps: usize,
    /// Step size applied to each point's own probability gradient.
    pub lr: f64,
    /// Halvings tried before a step is abandoned.
    pub backtracks: u32,
    /// A point whose accepted move is shorter than this stops moving.
    pub min_move: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            backtracks: 5,
            min_move: 1e-7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizeStats {
    pub iterations: usize,
    /// Points stopped because their gradient was not finite.
    pub frozen_non_finite: usize,
    /// Points stopped because every trial step lowered their probability or
    /// the accepted move fell below `min_move`.
    pub converged: usize,
    pub accepted_moves: usize,
    pub mean_probability_before: f64,
    pub mean_probability_after: f64,
}

/// Per-point gradient ascent on ψ_pf with backtracking: a trial step is
/// accepted only if that point's probability does not decrease.
///
/// A point whose trial steps are all rejected keeps its position and
/// gradient, so it would be rejected again at every later iteration; it is
/// retired instead of re-evaluated.
pub fn optimize_proxies(
    field: &dyn GaussianField,
    proxies: &ProxyPoints,
    cfg: &OptimizeConfig,
) -> Result<(ProxyPoints, OptimizeStats)> {
    let mut pos = proxies.positions.clone();
    let pg = field.probability_and_gradient(&pos);
    let mut prob: Vec<f64> = pg.iter().map(|(p, _)| *p).collect();
    let mut grad: Vec<Vec3> = pg.iter().map(|(_, g)| *g).collect();
    let mut stats = OptimizeStats {
        mean_probability_before: mean(&prob),
        ..Default::default()
    };
    let mut active: Vec<usize> = Vec::with_capacity(pos.len());
    for i in 0..pos.len() {
        if !prob[i].is_finite() || grad[i].iter().any(|g| !g.is_finite()) {
            stats.frozen_non_finite += 1;
        } else {
            active.push(i);
        }
    }
    for _ in 0..cfg.steps {
        if active.is_empty() {
            break;
        }
        stats.iterations += 1;
        let mut pending = active.clone();
        let mut moved = Vec::with_capacity(active.len());
        let mut step = cfg.lr;
        for _ in 0..=cfg.backtracks {
            if pending.is_empty() {
                break;
            }
            let trial: Vec<Vec3> = pending
                .iter()
                .map(|&i| clamp_unit_cube(std::array::from_fn(|k| pos[i][k] + step * grad[i][k])))
                .collect();
            let p_new = field.probability(&trial);
            let mut still = Vec::new();
            for ((&i, q), p) in pending.iter().zip(trial).zip(p_new) {
                if p >= prob[i] {
                    let d = crate::math::norm(crate::math::sub(q, pos[i]));
                    pos[i] = q;
                    prob[i] = p;
                    moved.push((i, d));
                } else {
                    still.push(i);
                }
            }
            pending = still;
            step *= 0.5;
        }
        stats.converged += pending.len();
        stats.accepted_moves += moved.len();
        let keep: Vec<usize> = moved
            .iter()
            .filter(|(_, d)| *d >= cfg.min_move)
            .map(|(i, _)| *i)
            .collect();
        stats.converged += moved.len() - keep.len();
        if keep.is_empty() {
            active.clear();
            break;
        }
        let pts: Vec<Vec3> = keep.iter().map(|&i| pos[i]).collect();
        let pg = field.probability_and_gradient(&pts);
        active.clear();
        for (&i, (_, g)) in keep.iter().zip(pg) {
            if g.iter().all(|v| v.is_finite()) {
                grad[i] = g;
                active.push(i);
            } else {
                stats.frozen_non_finite += 1;
            }
        }
    }
    stats.mean_probability_after = mean(&prob);
    Ok((
        ProxyPoints {
            positions: pos,
            probabilities: prob,
        },
        stats,
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Splat with the given centers and attributes read from the field.
pub fn extract_attributes(field: &dyn GaussianField, centers: &[Vec3]) -> GaussianSplat {
    let attrs = field.attributes(centers);
    GaussianSplat::new(
        centers
            .iter()
            .zip(attrs)
            .map(|(c, a)| Gaussian::from_parts(*c, a))
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub octree: OctreeConfig,
    pub optimize: OptimizeConfig,
    pub count: usize,
    /// Skip the refinement stage (ablation).
    pub skip_optimization: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            octree: OctreeConfig::default(),
            optimize: OptimizeConfig::default(),
            count: 100_000,
            skip_optimization: false,
        }
    }
}

impl ExtractConfig {
    pub fn with_count(count: usize) -> Self {
        Self {
            count,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractStats {
    pub depth_stats: Vec<DepthStats>,
    pub leaves: usize,
    pub count: usize,
    pub optimize: Option<OptimizeStats>,
    pub seconds_octree: f64,
    pub seconds_allocate: f64,
    pub seconds_optimize: f64,
    pub seconds_attributes: f64,
}

/// Refines proxies drawn from a precomputed cell set and reads attributes.
pub fn extract_from_cells(
    field: &dyn GaussianField,
    cells: &CellSet,
    cfg: &ExtractConfig,
    seed: u64,
) -> Result<(GaussianSplat, ExtractStats)> {
    if cfg.count == 0 {
        return Err(Error::Invalid("Gaussian count must be at least 1".into()));
    }
    let mut stats = ExtractStats {
        depth_stats: cells.stats.clone(),
        leaves: cells.len(),
        count: cfg.count,
        ..Default::default()
    };
    let t = Instant::now();
    let proxies = allocate_proxies(cells, cfg.count, seed)?;
    stats.seconds_allocate = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let refined = if cfg.skip_optimization {
        proxies
    } else {
        let (p, s) = optimize_proxies(field, &proxies, &cfg.optimize)?;
        stats.optimize = Some(s);
        p
    };
    stats.seconds_optimize = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let splat = extract_attributes(field, &refined.positions);
    stats.seconds_attributes = t.elapsed().as_secs_f64();
    Ok((splat, stats))
}

/// Octree search, proxy allocation, refinement and attribute extraction.
/// Returns exactly `cfg.count` Gaussians.
pub fn extract_splat(field: &dyn GaussianField, cfg: &ExtractConfig, seed: u64) -> Result<(GaussianSplat, ExtractStats)> {
    let t = Instant::now();
    let cells = octree_sample(field, &cfg.octree)?;
    let seconds_octree = t.elapsed().as_secs_f64();
    let (splat, mut stats) = extract_from_cells(field, &cells, cfg, seed)?;
    stats.seconds_octree = seconds_octree;
    Ok((splat, stats))
}
