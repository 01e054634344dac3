use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{init::gaussian_matrix, Activation, Mode, Parameterized};
use crate::error::{Error, Result};

/// Fully connected layer `y = activation(x W^T + b)`.
///
/// `weights` has shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Array2<f64>,
    bias: Array1<f64>,
    activation: Activation,
}

/// One recorded layer application.
#[derive(Debug, Clone)]
pub(crate) struct Record {
    pub input: Array2<f64>,
    /// Activation output before dropout.
    pub output: Array2<f64>,
    pub mask: Option<Array2<f64>>,
}

/// Forward values recorded in training mode, consumed by `backward`.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub(crate) records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::InvalidShape("empty weight matrix".into()));
        }
        if bias.len() != weights.nrows() {
            return Err(Error::InvalidShape(format!(
                "bias length {} does not match out_dim {}",
                bias.len(),
                weights.nrows()
            )));
        }
        // keep standard layout so parameter slices are contiguous
        let weights = weights.as_standard_layout().into_owned();
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize, activation: Activation) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::InvalidShape(format!(
                "layer must be at least 1x1, got {out_dim}x{in_dim}"
            )));
        }
        Self::new(Array2::zeros((out_dim, in_dim)), Array1::zeros(out_dim), activation)
    }

    /// Gaussian weights with the given std and zero bias.
    pub fn gaussian<R: Rng + ?Sized>(
        out_dim: usize,
        in_dim: usize,
        activation: Activation,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = gaussian_matrix(out_dim, in_dim, std, rng)?;
        Self::new(w, Array1::zeros(out_dim), activation)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.bias
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            activation: self.activation,
        }
    }

    fn affine(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::InvalidShape(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        let mut z = x.dot(&self.weights.t());
        z += &self.bias;
        Ok(z)
    }

    /// Batched forward pass. In training mode the input and output are
    /// recorded on `tape`.
    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode, tape: &mut Tape) -> Result<Array2<f64>> {
        let mut z = self.affine(&x)?;
        self.activation.apply(&mut z);
        if mode == Mode::Train {
            tape.records.push(Record {
                input: x.to_owned(),
                output: z.clone(),
                mask: None,
            });
        }
        Ok(z)
    }

    /// Single-vector inference.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let mut z = self.affine(&view)?;
        self.activation.apply(&mut z);
        Ok(z.into_raw_vec_and_offset().0)
    }

    /// Gradients for one recorded application given `dL/d(output)`.
    ///
    /// Returns the parameter gradients (as a layer of the same shape) and
    /// `dL/d(input)`.
    pub(crate) fn backward_record(
        &self,
        record: &Record,
        grad_out: &Array2<f64>,
    ) -> Result<(DenseLayer, Array2<f64>)> {
        if grad_out.dim() != record.output.dim() {
            return Err(Error::InvalidShape(format!(
                "upstream gradient {:?} does not match layer output {:?}",
                grad_out.dim(),
                record.output.dim()
            )));
        }
        let grad_act = match &record.mask {
            Some(mask) => grad_out * mask,
            None => grad_out.clone(),
        };
        let grad_z = self.activation.backprop(&record.output, &grad_act);
        let mut grad_w = grad_z.t().dot(&record.input);
        if !grad_w.is_standard_layout() {
            grad_w = grad_w.as_standard_layout().into_owned();
        }
        let grad_b = grad_z.sum_axis(Axis(0));
        let grad_in = grad_z.dot(&self.weights);
        Ok((
            DenseLayer {
                weights: grad_w,
                bias: grad_b,
                activation: self.activation,
            },
            grad_in,
        ))
    }

    /// Smallest `|x W^T + b|` over a recorded ReLU application; infinite for
    /// other activations. Finite differences are unreliable within a step of
    /// a ReLU kink.
    pub(crate) fn relu_margin(&self, record: &Record) -> f64 {
        if self.activation != Activation::Relu {
            return f64::INFINITY;
        }
        let z = record.input.dot(&self.weights.t()) + &self.bias;
        z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Backward pass through the most recent application recorded on `tape`.
    pub fn backward(&self, tape: &Tape, grad_out: &Array2<f64>) -> Result<(DenseLayer, Array2<f64>)> {
        let record = tape.records.last().ok_or(Error::NoGraph)?;
        self.backward_record(record, grad_out)
    }
}

impl Parameterized for DenseLayer {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("contiguous"),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("contiguous"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(act: Activation) -> DenseLayer {
        DenseLayer::new(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0], act).unwrap()
    }

    #[test]
    fn identity_linear_and_relu() {
        assert_eq!(identity(Activation::Linear).forward_vec(&[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(identity(Activation::Relu).forward_vec(&[1.0, -2.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn matches_straight_line_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for act in [Activation::Linear, Activation::Relu, Activation::Sigmoid] {
            let layer = DenseLayer::gaussian(4, 3, act, 1.0, &mut rng).unwrap();
            let x = [0.3, -1.2, 0.7];
            let got = layer.forward_vec(&x).unwrap();
            for i in 0..4 {
                let mut z = layer.bias()[i];
                for j in 0..3 {
                    z += layer.weights()[[i, j]] * x[j];
                }
                let want = match act {
                    Activation::Linear => z,
                    Activation::Relu => z.max(0.0),
                    Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                    Activation::Softmax => unreachable!(),
                };
                assert!((got[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let layer = identity(Activation::Linear);
        assert!(matches!(layer.forward_vec(&[1.0]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn bad_bias_rejected() {
        let err = DenseLayer::new(array![[1.0, 0.0]], array![0.0, 0.0], Activation::Linear);
        assert!(matches!(err, Err(Error::InvalidShape(_))));
    }

    #[test]
    fn square_loss_gradient() {
        // loss = (w x)^2 with w = 3, x = 1  => dloss/dw = 2 w x^2 = 6
        let layer = DenseLayer::new(array![[3.0]], array![0.0], Activation::Linear).unwrap();
        let mut tape = Tape::new();
        let y = layer.forward(array![[1.0]].view(), Mode::Train, &mut tape).unwrap();
        let (g, _) = layer.backward(&tape, &(2.0 * &y)).unwrap();
        assert_eq!(g.weights()[[0, 0]], 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let layer = DenseLayer::new(array![[0.0]], array![0.0], Activation::Sigmoid).unwrap();
        let mut tape = Tape::new();
        layer.forward(array![[1.0]].view(), Mode::Train, &mut tape).unwrap();
        let (g, _) = layer.backward(&tape, &array![[1.0]]).unwrap();
        assert_eq!(g.weights()[[0, 0]], 0.25);
    }

    #[test]
    fn empty_tape_is_no_graph() {
        let layer = identity(Activation::Linear);
        let tape = Tape::new();
        assert!(matches!(layer.backward(&tape, &array![[1.0, 1.0]]), Err(Error::NoGraph)));
    }

    #[test]
    fn infer_does_not_record() {
        let layer = identity(Activation::Linear);
        let mut tape = Tape::new();
        layer.forward(array![[1.0, 2.0]].view(), Mode::Infer, &mut tape).unwrap();
        assert!(tape.is_empty());
    }
}
