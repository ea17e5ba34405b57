//! Three-axis rotary position encoding over `(tau, x, y)`.
//!
//! Each attention head's dimensions are split into three contiguous blocks,
//! one per axis. Within a block, consecutive pairs `(2k, 2k + 1)` are rotated
//! by `position_axis * theta_k` with `theta_k = base^(-2k / d_axis)`.

use ndarray::{Array2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::seq::PositionId;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeTables {
    pub head_dim: usize,
    /// Dimensions given to `(tau, x, y)`.
    pub split: [usize; 3],
    pub base: f64,
    /// Per-axis frequencies, strictly decreasing.
    pub freqs: [Vec<f64>; 3],
}

pub fn build_rope_tables(head_dim: usize, split: [usize; 3], base: f64) -> Result<RopeTables> {
    if split.iter().any(|s| s % 2 != 0) || split.iter().sum::<usize>() != head_dim {
        return Err(Error::InvalidSplit(format!(
            "{split:?} must be even parts summing to head_dim {head_dim}"
        )));
    }
    if base <= 1.0 {
        return Err(Error::InvalidSplit(format!("base {base} must exceed 1")));
    }
    let freqs = split.map(|d| (0..d / 2).map(|k| base.powf(-2.0 * k as f64 / d as f64)).collect());
    Ok(RopeTables {
        head_dim,
        split,
        base,
        freqs,
    })
}

/// Per-token `cos`/`sin` of every rotated pair, `T × head_dim/2`.
#[derive(Clone, Debug)]
pub struct RopeAngles {
    pub cos: Array2<f64>,
    pub sin: Array2<f64>,
}

impl RopeTables {
    pub fn angles(&self, positions: &[PositionId]) -> RopeAngles {
        let half = self.head_dim / 2;
        let mut cos = Array2::zeros((positions.len(), half));
        let mut sin = Array2::zeros((positions.len(), half));
        for (t, p) in positions.iter().enumerate() {
            let coords = [p.tau as f64, p.x as f64, p.y as f64];
            let mut j = 0;
            for (axis, fs) in self.freqs.iter().enumerate() {
                for &f in fs {
                    let a = coords[axis] * f;
                    cos[[t, j]] = a.cos();
                    sin[[t, j]] = a.sin();
                    j += 1;
                }
            }
        }
        RopeAngles { cos, sin }
    }
}

/// Rotates every head of `x` (`T × heads·head_dim`) in place; `inverse`
/// rotates by the negated angles.
pub fn rotate_in_place(x: &mut ArrayViewMut2<f64>, angles: &RopeAngles, inverse: bool) {
    let half = angles.cos.ncols();
    let head_dim = 2 * half;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        let heads = row.len() / head_dim;
        for h in 0..heads {
            for j in 0..half {
                let (c, s) = (angles.cos[[t, j]], sign * angles.sin[[t, j]]);
                let i = h * head_dim + 2 * j;
                let (a, b) = (row[i], row[i + 1]);
                row[i] = a * c - b * s;
                row[i + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotates `T × head_dim` vectors by their positions.
pub fn apply_rope(vectors: &Array2<f64>, positions: &[PositionId], tables: &RopeTables) -> Result<Array2<f64>> {
    if vectors.ncols() != tables.head_dim || vectors.nrows() != positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vectors for {} positions and head_dim {}",
            vectors.dim(),
            positions.len(),
            tables.head_dim
        )));
    }
    let mut out = vectors.clone();
    rotate_in_place(&mut out.view_mut(), &tables.angles(positions), false);
    Ok(out)
}
