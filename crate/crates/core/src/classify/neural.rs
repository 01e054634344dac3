use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::BagFeature;
use crate::data::Label;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, Mode, OptimizerState, RmsProp, Tape, INIT_STD};

#[derive(Debug, Clone, PartialEq)]
pub struct NnConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for NnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 1e-3,
            rho: 0.9,
            epochs: 200,
            batch_size: 32,
            init_std: INIT_STD,
            seed: 0,
        }
    }
}

/// Softmax bag classifier over pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct NnClassifier {
    net: Mlp,
}

fn feature_matrix(rows: &[&BagFeature]) -> Array2<f64> {
    let d = rows[0].values.len();
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i].values[j])
}

impl NnClassifier {
    /// Cross-entropy training with RMSprop on shuffled minibatches.
    pub fn fit(train: &[BagFeature], cfg: &NnConfig) -> Result<Self> {
        let n_pos = train.iter().filter(|f| f.label.is_positive()).count();
        if n_pos == 0 || n_pos == train.len() {
            return Err(Error::DegenerateTraining(
                "neural classifier needs both classes in the training set".into(),
            ));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidHyperparameter("batch size must be >= 1".into()));
        }
        let d = train[0].values.len();
        if train.iter().any(|f| f.values.len() != d) {
            return Err(Error::InvalidShape("bag features differ in length".into()));
        }
        let opt = RmsProp {
            lr: cfg.lr,
            rho: cfg.rho,
            ..RmsProp::default()
        };
        opt.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sizes = vec![d];
        sizes.extend(&cfg.hidden);
        sizes.push(2);
        let mut acts = vec![Activation::Relu; cfg.hidden.len()];
        acts.push(Activation::Softmax);
        let mut net = Mlp::gaussian(&sizes, &acts, 0.0, cfg.init_std, &mut rng)?;

        let x = feature_matrix(&train.iter().collect::<Vec<_>>());
        let targets: Vec<usize> = train.iter().map(|f| f.label.target()).collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut state = OptimizerState::new();
        let mut tape = Tape::new();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                tape.clear();
                let xb = x.select(Axis(0), chunk);
                let probs = net.forward(xb.view(), Mode::Train, &mut rng, &mut tape)?;
                let scale = 1.0 / chunk.len() as f64;
                let mut g = Array2::zeros(probs.raw_dim());
                for (r, &i) in chunk.iter().enumerate() {
                    let p = probs[[r, targets[i]]];
                    if p > f64::MIN_POSITIVE {
                        g[[r, targets[i]]] = -scale / p;
                    }
                }
                let (grads, _) = net.backward(&tape, &g)?;
                opt.step(&mut net, &grads, &mut state)?;
            }
        }
        Ok(Self { net })
    }

    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::InvalidShape(e.to_string()))?;
        Ok(self.net.infer(row.view())?[[0, 1]])
    }

    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        Ok(Label::from_bool(self.probability(x)? > 0.5))
    }
}
