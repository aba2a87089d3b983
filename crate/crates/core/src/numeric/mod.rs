//! Dense tensors, reverse-mode differentiation, Adam and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use nn::{Activation, FinalInit, Linear, Mlp, MlpCache, SetEncoder};
pub use params::{ParamId, ParamStore};
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Coordinate pairs projected onto the XY, XZ and YZ planes. The first axis
/// indexes plane columns, the second plane rows.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Maps a coordinate in [-1,1] onto an `n`-node grid (nodes at both ends).
///
/// Returns the lower node of the containing cell, the fractional offset and
/// whether the input was clamped. A coordinate on an interior node belongs
/// to the cell below it.
pub fn grid_coord(x: f64, n: usize) -> (usize, f64, bool) {
    let clamped = !(-1.0..=1.0).contains(&x);
    let u = (x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (n - 1) as f64;
    let i = (u.ceil() as isize - 1).clamp(0, n as isize - 2) as usize;
    (i, u - i as f64, clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_coord_ties_go_to_lower_cell() {
        assert_eq!(grid_coord(-1.0, 5), (0, 0.0, false));
        assert_eq!(grid_coord(1.0, 5), (3, 1.0, false));
        // x = 0 is node 2 of 5
        assert_eq!(grid_coord(0.0, 5), (1, 1.0, false));
        let (i, f, c) = grid_coord(0.1, 5);
        assert_eq!(i, 2);
        assert!((f - 0.2).abs() < 1e-12 && !c);
        assert_eq!(grid_coord(3.0, 5), (3, 1.0, true));
    }
}
