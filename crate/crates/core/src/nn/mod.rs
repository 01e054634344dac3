//! Dense-network numeric core.
//!
//! Everything here works on row-major minibatches: an input of shape
//! `(batch, in_dim)` produces an output of shape `(batch, out_dim)`. A single
//! vector is just a batch of one.
//!
//! Gradients are stored in a value of the same type as the parameters they
//! belong to (a `DenseLayer` holding `dW`/`db`, an `Mlp` holding one such layer
//! per layer, ...). The [`Parameterized`] trait exposes both as a flat list of
//! slices in a fixed order, which is what the optimizer, the serializer and the
//! finite-difference checker iterate over.

pub mod dropout;
pub mod gradcheck;
pub mod init;
pub mod layer;
pub mod mlp;
pub mod optim;

use ndarray::{Array2, Axis};

pub use dropout::dropout;
pub use init::{init_weights, INIT_STD};
pub use layer::DenseLayer;
pub use mlp::{Mlp, Tape};
pub use optim::{OptimizerState, RmsProp};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Record intermediates on the tape and apply dropout.
    Train,
    /// Pure function of the parameters.
    Infer,
}

/// Largest f64 strictly below 1.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // keep outputs in the open interval even when saturated
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

impl Activation {
    /// Applies the activation in place. Softmax normalizes each row.
    pub fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Linear => {}
            Activation::Softmax => {
                for mut row in z.axis_iter_mut(Axis(0)) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
            }
        }
    }

    /// Maps `dL/d(output)` to `dL/d(pre-activation)` given the activation output.
    pub fn backprop(self, output: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => {
                let mut g = grad_out.clone();
                g.zip_mut_with(output, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Activation::Sigmoid => {
                let mut g = grad_out.clone();
                g.zip_mut_with(output, |g, &a| *g *= a * (1.0 - a));
                g
            }
            Activation::Linear => grad_out.clone(),
            Activation::Softmax => {
                let mut g = grad_out.clone();
                for (mut grow, arow) in g.axis_iter_mut(Axis(0)).zip(output.axis_iter(Axis(0))) {
                    let dot: f64 = grow.iter().zip(arow.iter()).map(|(g, a)| g * a).sum();
                    grow.zip_mut_with(&arow, |g, &a| *g = a * (*g - dot));
                }
                g
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Linear => 2,
            Activation::Softmax => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Linear,
            3 => Activation::Softmax,
            other => return Err(Error::Format(format!("unknown activation code {other}"))),
        })
    }
}

/// Anything exposing its trainable values as an ordered list of flat slices.
pub trait Parameterized {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// `self += scale * other`, slice by slice.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn fill(&mut self, value: f64) {
        for s in self.param_slices_mut() {
            s.fill(value);
        }
    }

    fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl Parameterized for Array2<f64> {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice().expect("standard layout")]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_slice_mut().expect("standard layout")]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relu_idempotent() {
        let mut a = array![[-1.5, 0.0, 2.0, -0.1, 3.3]];
        Activation::Relu.apply(&mut a);
        let once = a.clone();
        Activation::Relu.apply(&mut a);
        assert_eq!(a, once);
    }

    #[test]
    fn sigmoid_open_interval() {
        for z in [-1e6, -800.0, -40.0, 0.0, 40.0, 800.0, 1e6] {
            let s = sigmoid(z);
            assert!(s > 0.0 && s < 1.0, "sigmoid({z}) = {s}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut a = array![[1.0, 2.0, 3.0], [1000.0, -1000.0, 0.5], [0.0, 0.0, 0.0]];
        Activation::Softmax.apply(&mut a);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_codes_round_trip() {
        for act in [
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Linear,
            Activation::Softmax,
        ] {
            assert_eq!(Activation::from_code(act.code()).unwrap(), act);
        }
        assert!(Activation::from_code(9).is_err());
    }
}
