use ndarray::Axis;
use rand::seq::SliceRandom;

use super::joint::{JointBatch, JointLoss, JointTape};
use super::pairs::{assign_weights, sample_pairs, InstancePool};
use super::{MilModel, MilParams, TrainConfig};
use crate::data::{MilDataset, Normalizer};
use crate::error::{Error, Result};
use crate::nn::{Mode, OptimizerState};
use crate::seed::rng_for;
use crate::vae::VaeTape;

const STREAM_INIT: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_PAIRS: u64 = 3;
const STREAM_NOISE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// `VAE-` alone on negative instances.
    Warmup,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over minibatches; only `vae_neg` is populated during warm-up.
    pub loss: JointLoss,
    /// Calibration constant in effect during the epoch (0 in warm-up).
    pub calib_m: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_finite(epoch: usize, loss: &JointLoss, params: &MilParams) -> Result<()> {
    if !loss.total.is_finite() {
        return Err(Error::Divergence {
            epoch,
            detail: format!("mean loss is {}", loss.total),
        });
    }
    if !crate::nn::Parameterized::all_finite(params) {
        return Err(Error::Divergence {
            epoch,
            detail: "non-finite parameters".into(),
        });
    }
    Ok(())
}

/// Median `VAE-` reconstruction error over the pool's negative instances.
fn calibrate(params: &MilParams, pool: &InstancePool) -> Result<(f64, Vec<f64>)> {
    let errors = params.vae_neg.mean_path_recon_error(pool.x.view())?;
    let neg: Vec<f64> = pool.negative_rows().iter().map(|&i| errors[i]).collect();
    Ok((median(neg), errors))
}

/// Trains a model on raw (unnormalized) bags.
///
/// Fits a min-max normalizer on `dataset`, then runs `ceil(epochs / 4)`
/// warm-up epochs of `VAE-` on negative instances followed by joint epochs
/// over freshly sampled pairs. Before every joint epoch the calibration
/// constant `m` and the pair weights are recomputed from the current `VAE-`.
/// With `epochs == 0` the initialized, uncalibrated model is returned.
pub fn fit(dataset: &MilDataset, cfg: &TrainConfig) -> Result<MilModel> {
    cfg.validate()?;
    if dataset.n_negative_bags() == 0 || dataset.n_positive_bags() == 0 {
        return Err(Error::UnsatisfiablePairing(format!(
            "training needs both classes, have {} positive and {} negative bags",
            dataset.n_positive_bags(),
            dataset.n_negative_bags()
        )));
    }
    let normalizer = Normalizer::fit(dataset)?;
    let pool = InstancePool::from_dataset(&normalizer.apply(dataset)?);
    let mut params = MilParams::init(dataset.dim(), cfg, &mut rng_for(cfg.seed, STREAM_INIT))?;
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(MilModel {
            params,
            calib_m: 0.0,
            normalizer,
            history,
        });
    }

    let opt = cfg.optimizer();
    let mut state_pm = OptimizerState::new();
    let mut state_neg = OptimizerState::new();
    let mut state_clf = OptimizerState::new();
    let warmup = cfg.epochs.div_ceil(4);

    let mut warm_rng = rng_for(cfg.seed, STREAM_WARMUP);
    let mut negatives: Vec<usize> = pool.negative_rows().to_vec();
    let mut vae_tape = VaeTape::new();
    for epoch in 0..warmup {
        negatives.shuffle(&mut warm_rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in negatives.chunks(cfg.batch_size) {
            let x = pool.x.select(Axis(0), chunk);
            let loss = params
                .vae_neg
                .forward_loss(x.view(), Mode::Train, &mut warm_rng, None, &mut vae_tape)?;
            let n = chunk.len() as f64;
            let grads = params.vae_neg.backward(&vae_tape, &vec![1.0 / n; chunk.len()], None)?;
            opt.step(&mut params.vae_neg, &grads, &mut state_neg)?;
            sum += loss.total().sum() / n;
            batches += 1;
        }
        let mean = sum / batches as f64;
        let loss = JointLoss {
            vae_neg: mean,
            total: mean,
            ..JointLoss::default()
        };
        check_finite(epoch, &loss, &params)?;
        history.push(EpochLoss {
            epoch,
            phase: Phase::Warmup,
            loss,
            calib_m: 0.0,
        });
    }

    let mut pair_rng = rng_for(cfg.seed, STREAM_PAIRS);
    let mut noise_rng = rng_for(cfg.seed, STREAM_NOISE);
    let mut tape = JointTape::new();
    for epoch in warmup..cfg.epochs {
        let (m, errors) = calibrate(&params, &pool)?;
        let mut pairs = sample_pairs(&pool, cfg.pairs_per_epoch, &mut pair_rng)?;
        assign_weights(&mut pairs, &errors, m).map_err(|e| match e {
            Error::Uncalibrated(_) => Error::Divergence {
                epoch,
                detail: format!("calibration constant collapsed to {m}"),
            },
            other => other,
        })?;

        let mut acc = JointLoss::default();
        let mut batches = 0usize;
        for chunk in pairs.chunks(cfg.batch_size) {
            let batch = JointBatch::from_pairs(&pool, chunk);
            let loss = params.joint_forward(
                &batch,
                cfg.clf_loss_weight,
                Mode::Train,
                &mut noise_rng,
                None,
                &mut tape,
            )?;
            let grads = params.joint_backward(&tape)?;
            opt.step(&mut params.vae_pm, &grads.vae_pm, &mut state_pm)?;
            opt.step(&mut params.vae_neg, &grads.vae_neg, &mut state_neg)?;
            opt.step(&mut params.clf, &grads.clf, &mut state_clf)?;
            acc.vae_pm += loss.vae_pm;
            acc.vae_neg += loss.vae_neg;
            acc.clf += loss.clf;
            acc.total += loss.total;
            batches += 1;
        }
        let b = batches as f64;
        let loss = JointLoss {
            vae_pm: acc.vae_pm / b,
            vae_neg: acc.vae_neg / b,
            clf: acc.clf / b,
            total: acc.total / b,
        };
        check_finite(epoch, &loss, &params)?;
        history.push(EpochLoss {
            epoch,
            phase: Phase::Joint,
            loss,
            calib_m: m,
        });
    }

    let (calib_m, _) = calibrate(&params, &pool)?;
    Ok(MilModel {
        params,
        calib_m,
        normalizer,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::train::TrainConfig;

    fn small() -> (MilDataset, TrainConfig) {
        let ds = synth_generate(&SynthConfig {
            n_bags: 20,
            instances_per_bag: 5,
            dim: 6,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            latent_dim: 2,
            hidden: vec![16, 8],
            clf_hidden: vec![8, 8],
            epochs: 8,
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_epochs_is_uncalibrated() {
        let (ds, mut cfg) = small();
        cfg.epochs = 0;
        let model = fit(&ds, &cfg).unwrap();
        assert!(model.history.is_empty());
        assert!(matches!(model.check_calibrated(), Err(Error::Uncalibrated(_))));
    }

    #[test]
    fn joint_loss_decreases() {
        let (ds, mut cfg) = small();
        cfg.epochs = 40;
        cfg.lr = 3e-3;
        let model = fit(&ds, &cfg).unwrap();
        let joint: Vec<_> = model.history.iter().filter(|h| h.phase == Phase::Joint).collect();
        assert_eq!(joint.len(), 30);
        assert!(joint.last().unwrap().loss.total < joint[0].loss.total);
        assert!(model.calib_m > 0.0);
        for h in &model.history {
            let l = h.loss;
            assert!((l.total - (l.vae_pm + l.vae_neg + l.clf)).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_model_bytes() {
        let (ds, cfg) = small();
        let a = fit(&ds, &cfg).unwrap().to_bytes();
        let b = fit(&ds, &cfg).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = fit(&ds, &TrainConfig { seed: 1, ..cfg }).unwrap().to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn single_class_rejected() {
        let (ds, cfg) = small();
        let neg: Vec<usize> = (0..ds.len()).filter(|&i| !ds.bags()[i].label.is_positive()).collect();
        let only_neg = ds.subset(&neg).unwrap();
        assert!(matches!(fit(&only_neg, &cfg), Err(Error::UnsatisfiablePairing(_))));
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
