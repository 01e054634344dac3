use ndarray::Array2;
use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};

/// Inverted dropout.
///
/// In training mode each entry is zeroed with probability `rate` and the
/// survivors are scaled by `1 / (1 - rate)`, so inference is the identity.
/// Returns the output and, when a mask was drawn, the multiplicative mask
/// needed for the backward pass.
pub fn dropout<R: Rng + ?Sized>(
    x: Array2<f64>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidHyperparameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x, None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = x.mapv(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
    Ok((&x * &mask, Some(mask)))
}
