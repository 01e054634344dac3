use super::BagFeature;
use crate::data::Label;
use crate::error::{Error, Result};

pub const DEFAULT_ROUNDS: usize = 100;
pub const ALPHA_CLIP: f64 = 10.0;
/// Candidate stumps must beat the incumbent by more than this to replace it,
/// so float noise in the error sums cannot reorder exact ties. Errors below
/// it count as zero.
const ERROR_TIE: f64 = 1e-12;

/// Depth-1 decision stump voting `polarity` when `x[feature] > threshold`
/// and `-polarity` otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub polarity: f64,
    pub alpha: f64,
    /// Weighted training error when the stump was chosen.
    pub error: f64,
}

impl Stump {
    pub fn vote(&self, x: &[f64]) -> f64 {
        if x[self.feature] > self.threshold {
            self.polarity
        } else {
            -self.polarity
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StumpEnsemble {
    pub stumps: Vec<Stump>,
    /// Training majority, used when the vote is exactly zero.
    pub prior: Label,
}

impl StumpEnsemble {
    /// Weighted vote of the first `rounds` stumps.
    pub fn score_prefix(&self, x: &[f64], rounds: usize) -> f64 {
        self.stumps.iter().take(rounds).map(|s| s.alpha * s.vote(x)).sum()
    }

    pub fn predict_prefix(&self, x: &[f64], rounds: usize) -> Label {
        let s = self.score_prefix(x, rounds);
        if s > 0.0 {
            Label::Positive
        } else if s < 0.0 {
            Label::Negative
        } else {
            self.prior
        }
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        self.predict_prefix(x, self.stumps.len())
    }
}

fn best_stump(train: &[BagFeature], y: &[f64], w: &[f64]) -> Option<Stump> {
    let d = train[0].values.len();
    let mut best: Option<Stump> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for f in 0..d {
        order.sort_by(|&a, &b| train[a].values[f].total_cmp(&train[b].values[f]));
        // error of "positive above" with threshold below every point
        let mut err_pos: f64 = (0..train.len()).filter(|&i| y[i] < 0.0).map(|i| w[i]).sum();
        let mut err_neg: f64 = (0..train.len()).filter(|&i| y[i] > 0.0).map(|i| w[i]).sum();
        for k in 0..train.len() - 1 {
            let i = order[k];
            if y[i] > 0.0 {
                err_pos += w[i];
                err_neg -= w[i];
            } else {
                err_pos -= w[i];
                err_neg += w[i];
            }
            let lo = train[i].values[f];
            let hi = train[order[k + 1]].values[f];
            if lo == hi {
                continue;
            }
            let threshold = 0.5 * (lo + hi);
            for (polarity, err) in [(1.0, err_pos), (-1.0, err_neg)] {
                if best.map_or(true, |b| err < b.error - ERROR_TIE) {
                    best = Some(Stump {
                        feature: f,
                        threshold,
                        polarity,
                        alpha: 0.0,
                        error: if err < ERROR_TIE { 0.0 } else { err },
                    });
                }
            }
        }
    }
    best
}

/// Discrete AdaBoost over decision stumps with midpoint thresholds.
///
/// Stops before a round whose best stump has weighted error >= 0.5, and
/// after a round with zero error (its vote weight is clipped).
pub fn adaboost_fit(train: &[BagFeature], rounds: usize) -> Result<StumpEnsemble> {
    let n_pos = train.iter().filter(|f| f.label.is_positive()).count();
    if n_pos == 0 || n_pos == train.len() {
        return Err(Error::DegenerateTraining(
            "AdaBoost needs both classes in the training set".into(),
        ));
    }
    let d = train[0].values.len();
    if train.iter().any(|f| f.values.len() != d) {
        return Err(Error::InvalidShape("bag features differ in length".into()));
    }
    let prior = Label::from_bool(2 * n_pos >= train.len());
    let n = train.len();
    let y: Vec<f64> = train.iter().map(|f| f.label.sign() as f64).collect();
    let mut w = vec![1.0 / n as f64; n];
    let mut stumps = Vec::new();
    for _ in 0..rounds {
        let Some(mut stump) = best_stump(train, &y, &w) else {
            break;
        };
        if stump.error >= 0.5 {
            break;
        }
        stump.alpha = if stump.error > 0.0 {
            (0.5 * ((1.0 - stump.error) / stump.error).ln()).clamp(-ALPHA_CLIP, ALPHA_CLIP)
        } else {
            ALPHA_CLIP
        };
        stumps.push(stump);
        if stump.error == 0.0 {
            break;
        }
        for i in 0..n {
            w[i] *= (-stump.alpha * y[i] * stump.vote(&train[i].values)).exp();
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
    }
    Ok(StumpEnsemble { stumps, prior })
}
