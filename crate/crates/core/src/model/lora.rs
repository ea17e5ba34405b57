use ndarray::Array2;

use crate::error::{Error, Result};

/// Low-rank additive update of a linear map, in row-vector convention.
///
/// A linear layer maps rows `x` to `x · W`; with the delta attached it maps
/// them to `x · W + (x · down) · up`, so the effective weight is
/// `W + down · up`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta {
    /// `in x rank`.
    pub down: Array2<f64>,
    /// `rank x out`, zero at attachment.
    pub up: Array2<f64>,
}

impl LoraDelta {
    pub fn new(down: Array2<f64>, up: Array2<f64>) -> Result<Self> {
        let rank = down.ncols();
        if up.nrows() != rank {
            return Err(Error::ShapeMismatch(format!(
                "down {:?} and up {:?} disagree on rank",
                down.dim(),
                up.dim()
            )));
        }
        let dim = down.nrows().min(up.ncols());
        if rank == 0 || rank > dim {
            return Err(Error::InvalidRank { rank, dim });
        }
        Ok(Self { down, up })
    }

    /// A delta with zero `up`, which leaves the base map unchanged.
    pub fn zeros_up(down: Array2<f64>, out: usize) -> Result<Self> {
        let r = down.ncols();
        Self::new(down, Array2::zeros((r, out)))
    }

    pub fn rank(&self) -> usize {
        self.down.ncols()
    }

    pub fn effective_weight(&self, base: &Array2<f64>) -> Array2<f64> {
        base + &self.down.dot(&self.up)
    }
}

/// `input · base + (input · down) · up` for a batch of input rows.
pub fn apply_lora(base: &Array2<f64>, delta: &LoraDelta, input: &Array2<f64>) -> Result<Array2<f64>> {
    if input.ncols() != base.nrows() || delta.down.nrows() != base.nrows() || delta.up.ncols() != base.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "input {:?}, base {:?}, down {:?}, up {:?}",
            input.dim(),
            base.dim(),
            delta.down.dim(),
            delta.up.dim()
        )));
    }
    Ok(input.dot(base) + input.dot(&delta.down).dot(&delta.up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_up_is_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = rand_mat(&mut rng, 6, 5);
        let x = rand_mat(&mut rng, 3, 6);
        let d = LoraDelta::zeros_up(rand_mat(&mut rng, 6, 2), 5).unwrap();
        assert_eq!(apply_lora(&base, &d, &x).unwrap(), x.dot(&base));
    }

    #[test]
    fn identity_factorisation() {
        let n = 4;
        let eye = Array2::eye(n);
        let d = LoraDelta::new(eye.clone(), eye.clone()).unwrap();
        let x = Array2::from_shape_fn((2, n), |(i, j)| (i * n + j) as f64);
        assert_eq!(apply_lora(&Array2::zeros((n, n)), &d, &x).unwrap(), x);
    }

    #[test]
    fn matches_dense_effective_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = rand_mat(&mut rng, 7, 5);
        let d = LoraDelta::new(rand_mat(&mut rng, 7, 3), rand_mat(&mut rng, 3, 5)).unwrap();
        let x = rand_mat(&mut rng, 4, 7);
        let dense = x.dot(&d.effective_weight(&base));
        let lora = apply_lora(&base, &d, &x).unwrap();
        let err = (&dense - &lora).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn rank_beyond_dimension_rejected() {
        let r = LoraDelta::new(Array2::zeros((3, 4)), Array2::zeros((4, 3)));
        assert!(matches!(r, Err(Error::InvalidRank { rank: 4, dim: 3 })));
    }
}
