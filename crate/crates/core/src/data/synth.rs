use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Bag, Label, MilDataset};
use crate::error::{Error, Result};

/// Two-cluster MIL generator.
///
/// Negative instances are `N(0, I_d)`. Witnesses are `N(separation * u, I_d)`
/// with `u = (1, ..., 1) / sqrt(d)`. Every instance of a positive bag is a
/// witness with probability `witness_rate`, and each positive bag gets at
/// least one. Even-numbered bags are positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub instances_per_bag: usize,
    pub witness_rate: f64,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bags: 100,
            instances_per_bag: 10,
            witness_rate: 0.3,
            dim: 20,
            separation: 4.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Unit direction along which witnesses are shifted.
    pub fn direction(&self) -> Vec<f64> {
        vec![1.0 / (self.dim as f64).sqrt(); self.dim]
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<MilDataset> {
    if !(cfg.witness_rate > 0.0 && cfg.witness_rate <= 1.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "witness rate must lie in (0, 1], got {}",
            cfg.witness_rate
        )));
    }
    if !(cfg.separation > 0.0 && cfg.separation.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!(
            "separation must be > 0, got {}",
            cfg.separation
        )));
    }
    if cfg.n_bags < 2 || cfg.instances_per_bag == 0 || cfg.dim == 0 {
        return Err(Error::InvalidHyperparameter(format!(
            "need >= 2 bags, >= 1 instance per bag and >= 1 feature (got {}, {}, {})",
            cfg.n_bags, cfg.instances_per_bag, cfg.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shift: Vec<f64> = cfg.direction().iter().map(|u| u * cfg.separation).collect();
    let width = cfg.n_bags.to_string().len();

    let mut bags = Vec::with_capacity(cfg.n_bags);
    for b in 0..cfg.n_bags {
        let positive = b % 2 == 0;
        let m = cfg.instances_per_bag;
        let mut witness: Vec<bool> = (0..m)
            .map(|_| positive && rng.gen::<f64>() < cfg.witness_rate)
            .collect();
        if positive && !witness.iter().any(|&w| w) {
            witness[rng.gen_range(0..m)] = true;
        }
        let mut x = Array2::zeros((m, cfg.dim));
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = noise + if witness[i] { shift[j] } else { 0.0 };
            }
        }
        bags.push(Bag {
            id: format!("bag_{b:0width$}"),
            label: Label::from_bool(positive),
            instances: x,
            instance_labels: Some(witness),
        });
    }
    // MilDataset::new checks the MIL labeling rule against the ground truth
    MilDataset::new(bags)
}
