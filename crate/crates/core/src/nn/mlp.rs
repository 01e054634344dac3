use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{dropout, Activation, DenseLayer, Mode, Parameterized};
use crate::error::{Error, Result};

pub use super::layer::Tape;

/// A chain of dense layers. Dropout follows every ReLU layer in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    dropout: f64,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidShape(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidHyperparameter(format!(
                "dropout rate must lie in [0, 1), got {dropout}"
            )));
        }
        Ok(Self { layers, dropout })
    }

    /// Builds `sizes.len() - 1` layers with Gaussian weights and zero bias.
    pub fn gaussian<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        dropout: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::InvalidShape(format!(
                "{} sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| DenseLayer::gaussian(w[1], w[0], act, std, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, dropout)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths including the input, e.g. `[d, 512, 256]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.out_dim()))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            dropout: self.dropout,
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
        tape: &mut Tape,
    ) -> Result<Array2<f64>> {
        let mut h = self.layers[0].forward(x, mode, tape)?;
        h = self.maybe_dropout(0, h, mode, rng, tape)?;
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.forward(h.view(), mode, tape)?;
            h = self.maybe_dropout(i, h, mode, rng, tape)?;
        }
        Ok(h)
    }

    fn maybe_dropout<R: Rng + ?Sized>(
        &self,
        idx: usize,
        h: Array2<f64>,
        mode: Mode,
        rng: &mut R,
        tape: &mut Tape,
    ) -> Result<Array2<f64>> {
        if self.layers[idx].activation() != Activation::Relu || self.dropout == 0.0 {
            return Ok(h);
        }
        let (h, mask) = dropout(h, self.dropout, mode, rng)?;
        if let Some(mask) = mask {
            tape.records.last_mut().expect("layer recorded").mask = Some(mask);
        }
        Ok(h)
    }

    /// Deterministic forward pass without dropout or recording.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut h = self.layers[0].forward(x, Mode::Infer, &mut tape)?;
        for layer in &self.layers[1..] {
            h = layer.forward(h.view(), Mode::Infer, &mut tape)?;
        }
        Ok(h)
    }

    /// Distance of the recorded pass from the nearest ReLU kink.
    pub fn relu_margin(&self, tape: &Tape) -> f64 {
        self.layers
            .iter()
            .zip(&tape.records)
            .map(|(l, r)| l.relu_margin(r))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass over a tape recorded by exactly one `forward` call.
    ///
    /// Returns parameter gradients in an `Mlp` of the same shape and the
    /// gradient with respect to the network input.
    pub fn backward(&self, tape: &Tape, grad_out: &Array2<f64>) -> Result<(Mlp, Array2<f64>)> {
        if tape.is_empty() {
            return Err(Error::NoGraph);
        }
        if tape.len() != self.layers.len() {
            return Err(Error::InvalidShape(format!(
                "tape holds {} records for a {}-layer network",
                tape.len(),
                self.layers.len()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, record) in self.layers.iter().zip(&tape.records).rev() {
            let (lg, gin) = layer.backward_record(record, &g)?;
            grads.push(lg);
            g = gin;
        }
        grads.reverse();
        Ok((
            Mlp {
                layers: grads,
                dropout: self.dropout,
            },
            g,
        ))
    }
}

impl Parameterized for Mlp {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{compare, numeric_gradient};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sum_sq(y: &Array2<f64>) -> f64 {
        y.iter().map(|v| v * v).sum::<f64>() / 2.0
    }

    #[test]
    fn rejects_unchained_layers() {
        let a = DenseLayer::zeros(3, 2, Activation::Relu).unwrap();
        let b = DenseLayer::zeros(1, 4, Activation::Linear).unwrap();
        assert!(matches!(Mlp::new(vec![a, b], 0.0), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Mlp::gaussian(
            &[3, 5, 2],
            &[Activation::Sigmoid, Activation::Linear],
            0.0,
            0.8,
            &mut rng,
        )
        .unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * 0.3 + j as f64 * 0.2);
        let mut tape = Tape::new();
        let y = net.forward(x.view(), Mode::Train, &mut rng, &mut tape).unwrap();
        let (grads, _) = net.backward(&tape, &y).unwrap();
        let numeric = numeric_gradient(&mut net, 1e-5, |n| sum_sq(&n.infer(x.view()).unwrap()));
        let report = compare(&grads, &numeric);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn dropout_mask_enters_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::gaussian(
            &[2, 6, 1],
            &[Activation::Relu, Activation::Linear],
            0.5,
            1.0,
            &mut rng,
        )
        .unwrap();
        let x = ndarray::array![[0.4, -0.9], [1.1, 0.3]];
        let mut tape = Tape::new();
        let y = net
            .forward(x.view(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(77), &mut tape)
            .unwrap();
        let (grads, _) = net.backward(&tape, &y).unwrap();
        let numeric = numeric_gradient(&mut net, 1e-5, |n| {
            let mut t = Tape::new();
            let y = n
                .forward(x.view(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(77), &mut t)
                .unwrap();
            sum_sq(&y)
        });
        let report = compare(&grads, &numeric);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn backward_without_forward_is_no_graph() {
        let net = Mlp::new(vec![DenseLayer::zeros(1, 1, Activation::Linear).unwrap()], 0.0).unwrap();
        assert!(matches!(
            net.backward(&Tape::new(), &ndarray::array![[1.0]]),
            Err(Error::NoGraph)
        ));
    }
}
