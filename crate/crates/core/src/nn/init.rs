use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Standard deviation of the zero-mean Gaussian weight initializer.
pub const INIT_STD: f64 = 0.01;

/// Draws an `out_dim x in_dim` matrix with i.i.d. `N(0, INIT_STD^2)` entries.
pub fn init_weights<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Result<Array2<f64>> {
    gaussian_matrix(out_dim, in_dim, INIT_STD, rng)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(
    out_dim: usize,
    in_dim: usize,
    std: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if out_dim == 0 || in_dim == 0 {
        return Err(Error::InvalidShape(format!(
            "weight matrix must be at least 1x1, got {out_dim}x{in_dim}"
        )));
    }
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::InvalidHyperparameter(format!("init std {std}: {e}")))?;
    let data: Vec<f64> = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
    Ok(Array2::from_shape_vec((out_dim, in_dim), data).expect("length matches shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn moments_match_init_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut drawn = 0usize;
        while drawn < n {
            let w = init_weights(3, 3, &mut rng).unwrap();
            for &v in w.iter() {
                sum += v;
                sum_sq += v * v;
            }
            drawn += 9;
        }
        let mean = sum / drawn as f64;
        let std = (sum_sq / drawn as f64 - mean * mean).sqrt();
        let se = INIT_STD / (drawn as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
        assert!((std - INIT_STD).abs() < 0.01 * INIT_STD, "std {std}");
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = init_weights(4, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_weights(4, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_dim_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(init_weights(0, 3, &mut rng), Err(Error::InvalidShape(_))));
        assert!(matches!(init_weights(3, 0, &mut rng), Err(Error::InvalidShape(_))));
    }
}
