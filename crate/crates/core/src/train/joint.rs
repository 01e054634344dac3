use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::pairs::{InstancePool, TrainingPair};
use super::MilParams;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Mode, Tape};
use crate::vae::{VaeTape, RECON_CLIP};

/// Class probabilities `[P(negative), P(positive)]` for each row of
/// `[mu_pm | mu_neg]`.
pub fn discriminate<'a, R: Rng + ?Sized>(
    clf: &Mlp,
    mu_pm: ArrayView2<'a, f64>,
    mu_neg: ArrayView2<'a, f64>,
    mode: Mode,
    rng: &mut R,
    tape: &mut Tape,
) -> Result<Array2<f64>> {
    if mu_pm.dim() != mu_neg.dim() || clf.in_dim() != 2 * mu_pm.ncols() {
        return Err(Error::InvalidShape(format!(
            "discriminator takes {} inputs, got latents {:?} and {:?}",
            clf.in_dim(),
            mu_pm.dim(),
            mu_neg.dim()
        )));
    }
    let input = concatenate(Axis(1), &[mu_pm, mu_neg]).expect("equal rows");
    clf.forward(input.view(), mode, rng, tape)
}

/// A minibatch of pairs materialized as dense rows.
#[derive(Debug, Clone)]
pub struct JointBatch {
    pub x_any: Array2<f64>,
    pub x_neg: Array2<f64>,
    pub targets: Vec<bool>,
    pub weights: Vec<f64>,
}

impl JointBatch {
    pub fn from_pairs(pool: &InstancePool, pairs: &[TrainingPair]) -> Self {
        let any: Vec<usize> = pairs.iter().map(|p| p.any).collect();
        let neg: Vec<usize> = pairs.iter().map(|p| p.neg).collect();
        Self {
            x_any: pool.x.select(Axis(0), &any),
            x_neg: pool.x.select(Axis(0), &neg),
            targets: pairs.iter().map(|p| p.target).collect(),
            weights: pairs.iter().map(|p| p.weight).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Batch-mean loss terms. `clf` already includes the sample weights and the
/// classifier loss weight, so `total = vae_pm + vae_neg + clf`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointLoss {
    pub vae_pm: f64,
    pub vae_neg: f64,
    pub clf: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct JointTape {
    pm: VaeTape,
    neg: VaeTape,
    clf: Tape,
    probs: Array2<f64>,
    targets: Vec<bool>,
    weights: Vec<f64>,
    clf_loss_weight: f64,
    recorded: bool,
}

impl JointTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

impl MilParams {
    /// Mean over the batch of
    /// `L_VAE±(x_any) + L_VAE-(x_neg) + c * w * BCE(discriminator, target)`.
    ///
    /// `noise` fixes the reparameterization draws of both VAEs.
    pub fn joint_forward<R: Rng + ?Sized>(
        &self,
        batch: &JointBatch,
        clf_loss_weight: f64,
        mode: Mode,
        rng: &mut R,
        noise: Option<(&Array2<f64>, &Array2<f64>)>,
        tape: &mut JointTape,
    ) -> Result<JointLoss> {
        let n = batch.len();
        if n == 0 || batch.x_neg.nrows() != n || batch.weights.len() != n || batch.x_any.nrows() != n {
            return Err(Error::InvalidShape("inconsistent or empty pair batch".into()));
        }
        let (eps_pm, eps_neg) = match noise {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        *tape = JointTape::new();
        let l_pm = self
            .vae_pm
            .forward_loss(batch.x_any.view(), mode, rng, eps_pm, &mut tape.pm)?;
        let l_neg = self
            .vae_neg
            .forward_loss(batch.x_neg.view(), mode, rng, eps_neg, &mut tape.neg)?;

        let (mu_pm, mu_neg) = if mode == Mode::Train {
            (tape.pm.mu().clone(), tape.neg.mu().clone())
        } else {
            // inference pass: re-encode deterministically for the means
            (
                self.vae_pm.encode_infer(batch.x_any.view())?.mu,
                self.vae_neg.encode_infer(batch.x_neg.view())?.mu,
            )
        };
        let probs = discriminate(&self.clf, mu_pm.view(), mu_neg.view(), mode, rng, &mut tape.clf)?;
        let clf_terms: f64 = (0..n)
            .map(|i| {
                let p = probs[[i, batch.targets[i] as usize]].max(RECON_CLIP);
                clf_loss_weight * batch.weights[i] * -p.ln()
            })
            .sum();

        let nf = n as f64;
        let vae_pm = l_pm.total().sum() / nf;
        let vae_neg = l_neg.total().sum() / nf;
        let clf = clf_terms / nf;
        if mode == Mode::Train {
            tape.probs = probs;
            tape.targets = batch.targets.clone();
            tape.weights = batch.weights.clone();
            tape.clf_loss_weight = clf_loss_weight;
            tape.recorded = true;
        }
        Ok(JointLoss {
            vae_pm,
            vae_neg,
            clf,
            total: vae_pm + vae_neg + clf,
        })
    }

    /// Distance of the recorded pass from the nearest ReLU kink.
    pub fn relu_margin(&self, tape: &JointTape) -> f64 {
        self.vae_pm
            .relu_margin(&tape.pm)
            .min(self.vae_neg.relu_margin(&tape.neg))
            .min(self.clf.relu_margin(&tape.clf))
    }

    /// Gradients of the batch-mean joint loss recorded on `tape`. The
    /// classifier term backpropagates into both encoders.
    pub fn joint_backward(&self, tape: &JointTape) -> Result<MilParams> {
        if !tape.recorded {
            return Err(Error::NoGraph);
        }
        let n = tape.targets.len();
        let nf = n as f64;
        let mut g_probs = Array2::zeros(tape.probs.raw_dim());
        for i in 0..n {
            let t = tape.targets[i] as usize;
            let p = tape.probs[[i, t]];
            if p > RECON_CLIP {
                g_probs[[i, t]] = -tape.clf_loss_weight * tape.weights[i] / (p * nf);
            }
        }
        let (g_clf, g_in) = self.clf.backward(&tape.clf, &g_probs)?;
        let nz = self.latent_dim();
        let g_mu_pm = g_in.slice(s![.., ..nz]).to_owned();
        let g_mu_neg = g_in.slice(s![.., nz..]).to_owned();
        let scale = vec![1.0 / nf; n];
        let g_pm = self.vae_pm.backward(&tape.pm, &scale, Some(&g_mu_pm))?;
        let g_neg = self.vae_neg.backward(&tape.neg, &scale, Some(&g_mu_neg))?;
        Ok(MilParams {
            vae_pm: g_pm,
            vae_neg: g_neg,
            clf: g_clf,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{compare, numeric_gradient};
    use crate::nn::{Activation, Parameterized};
    use crate::train::TrainConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_dim: 2,
            hidden: vec![5, 4],
            clf_hidden: vec![4, 3],
            dropout: 0.0,
            init_std: 0.5,
            ..TrainConfig::default()
        }
    }

    fn batch() -> JointBatch {
        JointBatch {
            x_any: ndarray::array![[0.1, 0.9, 0.3], [0.7, 0.2, 0.6], [0.4, 0.4, 0.95]],
            x_neg: ndarray::array![[0.2, 0.1, 0.8], [0.3, 0.3, 0.3], [0.9, 0.6, 0.05]],
            targets: vec![true, false, true],
            weights: vec![0.4, 1.0, 0.8],
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let clf = Mlp::new(
            vec![
                crate::nn::DenseLayer::zeros(3, 4, Activation::Relu).unwrap(),
                crate::nn::DenseLayer::zeros(2, 3, Activation::Softmax).unwrap(),
            ],
            0.0,
        )
        .unwrap();
        let mu = ndarray::array![[1.0, -2.0], [0.3, 5.0]];
        let p = discriminate(
            &clf,
            mu.view(),
            mu.view(),
            Mode::Infer,
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut Tape::new(),
        )
        .unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_weight_drops_classifier_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MilParams::init(3, &tiny_config(), &mut rng).unwrap();
        let mut b = batch();
        b.weights = vec![0.0; 3];
        let eps_a = ndarray::array![[0.1, 0.2], [0.3, -0.4], [0.0, 1.0]];
        let eps_b = ndarray::array![[-0.1, 0.5], [0.2, 0.2], [1.1, -0.3]];
        let mut tape = JointTape::new();
        let l = params
            .joint_forward(&b, 1.0, Mode::Train, &mut rng, Some((&eps_a, &eps_b)), &mut tape)
            .unwrap();
        assert_eq!(l.clf, 0.0);
        assert_eq!(l.total, l.vae_pm + l.vae_neg);
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = MilParams::init(3, &tiny_config(), &mut rng).unwrap();
        let b = batch();
        let eps_a = ndarray::array![[0.1, 0.2], [0.3, -0.4], [0.0, 1.0]];
        let eps_b = ndarray::array![[-0.1, 0.5], [0.2, 0.2], [1.1, -0.3]];
        let mut tape = JointTape::new();
        let l = params
            .joint_forward(&b, 1.0, Mode::Train, &mut rng, Some((&eps_a, &eps_b)), &mut tape)
            .unwrap();
        assert!((l.total - (l.vae_pm + l.vae_neg + l.clf)).abs() < 1e-12);
        let grads = params.joint_backward(&tape).unwrap();
        assert_eq!(grads.param_count(), params.param_count());
        let numeric = numeric_gradient(&mut params, 1e-5, |p| {
            let mut t = JointTape::new();
            p.joint_forward(
                &b,
                1.0,
                Mode::Train,
                &mut ChaCha8Rng::seed_from_u64(0),
                Some((&eps_a, &eps_b)),
                &mut t,
            )
            .unwrap()
            .total
        });
        let report = compare(&grads, &numeric);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn backward_without_forward() {
        let params = MilParams::init(3, &tiny_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(params.joint_backward(&JointTape::new()), Err(Error::NoGraph)));
    }
}
