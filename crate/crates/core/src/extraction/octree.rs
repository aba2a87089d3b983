use serde::{Deserialize, Serialize};

use crate::field_api::GaussianField;
use crate::math::Vec3;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OctreeConfig {
    pub max_depth: u32,
    pub threshold: f64,
    /// Lattice points per axis in each cell (corners included).
    pub samples_per_axis: usize,
    /// Assumed Lipschitz bound of the field, used to keep interior cells
    /// whose lattice maximum is within `lipschitz · r` of the threshold,
    /// where `r` is the farthest any point of the cell lies from its nearest
    /// lattice point. Zero disables the margin.
    pub lipschitz: f64,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 8,
            threshold: 0.3,
            samples_per_axis: 3,
            lipschitz: 20.0,
        }
    }
}

impl OctreeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=12).contains(&self.max_depth) {
            return Err(Error::Invalid(format!("octree depth must be in 1..=12, got {}", self.max_depth)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Invalid(format!("threshold must be in (0,1), got {}", self.threshold)));
        }
        if self.samples_per_axis < 2 || self.samples_per_axis > 9 {
            return Err(Error::Invalid(format!(
                "samples_per_axis must be in 2..=9, got {}",
                self.samples_per_axis
            )));
        }
        if !(self.lipschitz >= 0.0) {
            return Err(Error::Invalid("lipschitz margin must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub center: Vec3,
    pub half_extent: f64,
    pub score: f64,
}

impl Cell {
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= self.half_extent)
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.half_extent).powi(3)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub depth: u32,
    pub live_cells: usize,
    pub retained_cells: usize,
    pub lattice_points: usize,
}

/// Retained leaves of the final depth in lexicographic (x, y, z) index order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellSet {
    pub depth: u32,
    pub cells: Vec<Cell>,
    /// Integer coordinates of each cell at `depth`.
    pub coords: Vec<[u32; 3]>,
    pub stats: Vec<DepthStats>,
}

impl CellSet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Index of the retained leaf containing `p`, if any.
    pub fn find(&self, p: Vec3) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(p))
    }
}

fn pack(g: [u32; 3]) -> u64 {
    ((g[0] as u64) << 42) | ((g[1] as u64) << 21) | g[2] as u64
}

fn unpack(k: u64) -> [u32; 3] {
    let m = (1u64 << 21) - 1;
    [(k >> 42) as u32, ((k >> 21) & m) as u32, (k & m) as u32]
}

/// Scores every cell in `coords` at `depth` by the maximum field value over
/// its lattice. Lattice points shared between cells are evaluated once.
fn score_cells(field: &dyn GaussianField, coords: &[[u32; 3]], depth: u32, s: usize) -> (Vec<f64>, usize) {
    let per = (s - 1) as u32;
    let intervals = per as f64 * (1u64 << depth) as f64;
    let to_point = |g: [u32; 3]| g.map(|v| -1.0 + 2.0 * v as f64 / intervals);
    let corners = |c: [u32; 3]| {
        (0..=per).flat_map(move |dx| {
            (0..=per).flat_map(move |dy| (0..=per).map(move |dz| [c[0] * per + dx, c[1] * per + dy, c[2] * per + dz]))
        })
    };
    let max_of = |it: &mut dyn Iterator<Item = f64>| {
        // NaN never beats a finite value
        it.fold(f64::NEG_INFINITY, |best, v| if v > best { v } else { best })
    };

    // Bounding box of the lattice in grid units.
    let mut lo = [u32::MAX; 3];
    let mut hi = [0u32; 3];
    for c in coords {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k] * per);
            hi[k] = hi[k].max(c[k] * per + per);
        }
    }
    let ext = std::array::from_fn::<usize, 3, _>(|k| (hi[k] - lo[k]) as usize + 1);
    let volume = ext[0] * ext[1] * ext[2];
    let lattice_per_cell = (per as usize + 1).pow(3);

    if volume <= 4 * coords.len() * lattice_per_cell {
        // Mostly full box: index lattice points through a dense slot array.
        let slot = |g: [u32; 3]| {
            ((g[0] - lo[0]) as usize * ext[1] + (g[1] - lo[1]) as usize) * ext[2] + (g[2] - lo[2]) as usize
        };
        let mut ids = vec![u32::MAX; volume];
        for c in coords {
            for g in corners(*c) {
                ids[slot(g)] = 0;
            }
        }
        let mut points = Vec::new();
        for (i, id) in ids.iter_mut().enumerate() {
            if *id == 0 {
                *id = points.len() as u32;
                let z = i % ext[2];
                let y = (i / ext[2]) % ext[1];
                let x = i / (ext[1] * ext[2]);
                points.push(to_point([lo[0] + x as u32, lo[1] + y as u32, lo[2] + z as u32]));
            }
        }
        let values = field.probability(&points);
        let scores = coords
            .iter()
            .map(|c| max_of(&mut corners(*c).map(|g| values[ids[slot(g)] as usize])))
            .collect();
        return (scores, points.len());
    }

    let mut keys: Vec<u64> = coords.iter().flat_map(|c| corners(*c).map(pack)).collect();
    keys.sort_unstable();
    keys.dedup();
    let points: Vec<Vec3> = keys.iter().map(|k| to_point(unpack(*k))).collect();
    let values = field.probability(&points);
    let scores = coords
        .iter()
        .map(|c| {
            max_of(&mut corners(*c).map(|g| values[keys.binary_search(&pack(g)).expect("key inserted above")]))
        })
        .collect();
    (scores, points.len())
}

fn cell_of(c: [u32; 3], depth: u32, score: f64) -> Cell {
    let h = 1.0 / (1u64 << depth) as f64;
    Cell {
        center: c.map(|i| -1.0 + (2 * i + 1) as f64 * h),
        half_extent: h,
        score,
    }
}

/// Progressive octree search for regions where the field reaches the
/// threshold. Interior depths keep cells with lattice max ≥ θ − K·r; the
/// final depth keeps cells with lattice max ≥ θ.
pub fn octree_sample(field: &dyn GaussianField, cfg: &OctreeConfig) -> Result<CellSet> {
    cfg.validate()?;
    let s = cfg.samples_per_axis;
    let mut live: Vec<[u32; 3]> = vec![[0, 0, 0]];
    let mut stats = Vec::new();
    for depth in 0..=cfg.max_depth {
        let (scores, n_points) = score_cells(field, &live, depth, s);
        let leaf = depth == cfg.max_depth;
        let half = 1.0 / (1u64 << depth) as f64;
        let spacing = 2.0 * half / (s - 1) as f64;
        let margin = if leaf { 0.0 } else { cfg.lipschitz * spacing * 3f64.sqrt() / 2.0 };
        let keep: Vec<usize> = (0..live.len())
            .filter(|i| scores[*i] >= cfg.threshold - margin)
            .collect();
        stats.push(DepthStats {
            depth,
            live_cells: live.len(),
            retained_cells: keep.len(),
            lattice_points: n_points,
        });
        log::debug!("octree depth {depth}: {} of {} cells kept", keep.len(), live.len());
        if keep.is_empty() {
            return Err(Error::EmptyField);
        }
        if leaf {
            let coords: Vec<[u32; 3]> = keep.iter().map(|i| live[*i]).collect();
            let cells = keep.iter().map(|i| cell_of(live[*i], depth, scores[*i])).collect();
            return Ok(CellSet {
                depth,
                cells,
                coords,
                stats,
            });
        }
        let mut next = Vec::with_capacity(keep.len() * 8);
        for i in keep {
            let c = live[i];
            for d in 0..8u32 {
                next.push([2 * c[0] + (d >> 2), 2 * c[1] + ((d >> 1) & 1), 2 * c[2] + (d & 1)]);
            }
        }
        next.sort_unstable();
        live = next;
    }
    unreachable!("loop returns at max_depth")
}

/// Reference: scores all 8^L cells at the final depth with the leaf rule.
/// Only practical for small depths.
pub fn octree_dense(field: &dyn GaussianField, cfg: &OctreeConfig) -> Result<CellSet> {
    cfg.validate()?;
    let depth = cfg.max_depth;
    let n = 1u32 << depth;
    let mut all = Vec::with_capacity((n as usize).pow(3));
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                all.push([x, y, z]);
            }
        }
    }
    let (scores, n_points) = score_cells(field, &all, depth, cfg.samples_per_axis);
    let keep: Vec<usize> = (0..all.len()).filter(|i| scores[*i] >= cfg.threshold).collect();
    Ok(CellSet {
        depth,
        cells: keep.iter().map(|i| cell_of(all[*i], depth, scores[*i])).collect(),
        coords: keep.iter().map(|i| all[*i]).collect(),
        stats: vec![DepthStats {
            depth,
            live_cells: all.len(),
            retained_cells: keep.len(),
            lattice_points: n_points,
        }],
    })
}

/// Leaves the dense reference keeps but the progressive search dropped.
pub fn pruning_misses(progressive: &CellSet, dense: &CellSet) -> usize {
    dense
        .coords
        .iter()
        .filter(|c| progressive.coords.binary_search(c).is_err())
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_api::GaussianField;
    use crate::Attributes;

    struct Wave;

    impl GaussianField for Wave {
        fn probability(&self, p: &[Vec3]) -> Vec<f64> {
            p.iter().map(|q| (3.0 * q[0] + q[1] * q[1] - 2.0 * q[2]).sin().abs()).collect()
        }
        fn probability_and_gradient(&self, _: &[Vec3]) -> Vec<(f64, Vec3)> {
            unimplemented!()
        }
        fn attributes(&self, _: &[Vec3]) -> Vec<Attributes> {
            unimplemented!()
        }
    }

    #[test]
    fn sparse_and_dense_lattice_paths_agree() {
        let depth = 3;
        let all: Vec<[u32; 3]> = (0..512u32).map(|i| [i >> 6, (i >> 3) & 7, i & 7]).collect();
        let picked = [5usize, 200, 511];
        let sparse: Vec<[u32; 3]> = picked.iter().map(|&i| all[i]).collect();
        for s in [2, 3, 4] {
            let (dense, n_dense) = score_cells(&Wave, &all, depth, s);
            let (few, n_few) = score_cells(&Wave, &sparse, depth, s);
            assert_eq!(n_dense, ((s - 1) * 8 + 1).pow(3));
            assert_eq!(n_few, 3 * s.pow(3));
            for (k, &i) in picked.iter().enumerate() {
                assert_eq!(few[k], dense[i]);
            }
        }
    }
}
