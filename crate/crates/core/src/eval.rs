//! Stratified k-fold evaluation of the full pipeline.

use rayon::prelude::*;

use crate::classify::{bag_features, metrics, BagClassifier, ClassifierConfig, Metrics};
use crate::data::{stratified_kfold, Label, MilDataset};
use crate::error::Result;
use crate::seed::derive_seed;
use crate::train::{fit, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Metrics,
    /// Latent separation proxy on the training bags before and after
    /// training, when instance ground truth is available.
    pub separation: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub folds: Vec<FoldResult>,
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CvReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.metrics.accuracy).collect()
    }

    pub fn f_scores(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.metrics.f_score).collect()
    }

    pub fn accuracy(&self) -> (f64, f64) {
        mean_std(&self.accuracies())
    }

    pub fn f_score(&self) -> (f64, f64) {
        mean_std(&self.f_scores())
    }

    /// Smallest per-fold ratio of trained to initial separation.
    pub fn min_separation_gain(&self) -> Option<f64> {
        self.folds
            .iter()
            .map(|f| f.separation.map(|(init, trained)| trained / init))
            .collect::<Option<Vec<f64>>>()
            .map(|r| r.into_iter().fold(f64::INFINITY, f64::min))
    }
}

/// Trains on `train` and scores the bags of `test`.
pub fn evaluate_split(
    train: &MilDataset,
    test: &MilDataset,
    train_cfg: &TrainConfig,
    clf_cfg: &ClassifierConfig,
) -> Result<(Metrics, Option<(f64, f64)>)> {
    let model = fit(train, train_cfg)?;
    model.check_calibrated()?;
    let separation = if train.has_truth() {
        let init = fit(train, &TrainConfig { epochs: 0, ..train_cfg.clone() })?;
        Some((init.separation_proxy(train)?, model.separation_proxy(train)?))
    } else {
        None
    };
    let clf = BagClassifier::fit(&bag_features(&model, train)?, clf_cfg)?;
    let test_features = bag_features(&model, test)?;
    let preds = clf.predict_all(&test_features)?;
    let labels: Vec<Label> = test_features.iter().map(|f| f.label).collect();
    Ok((metrics(&preds, &labels)?, separation))
}

/// Runs `k`-fold cross-validation. Fold `i` trains with seed
/// `derive_seed(seed, i)`, so results do not depend on scheduling.
pub fn cross_validate(
    ds: &MilDataset,
    train_cfg: &TrainConfig,
    clf_cfg: &ClassifierConfig,
    k: usize,
    seed: u64,
) -> Result<CvReport> {
    train_cfg.validate()?;
    let plan = stratified_kfold(ds, k, seed)?;
    let folds = (0..k)
        .into_par_iter()
        .map(|fold| -> Result<FoldResult> {
            let (tr, te) = plan.split(fold);
            let train = ds.subset(&tr)?;
            let test = ds.subset(&te)?;
            let fold_seed = derive_seed(seed, fold as u64);
            let tcfg = TrainConfig { seed: fold_seed, ..train_cfg.clone() };
            let mut ccfg = clf_cfg.clone();
            ccfg.nn.seed = fold_seed;
            let (metrics, separation) = evaluate_split(&train, &test, &tcfg, &ccfg).map_err(|e| e.in_fold(fold))?;
            Ok(FoldResult {
                fold,
                n_train: train.len(),
                n_test: test.len(),
                metrics,
                separation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport {
        k,
        seed,
        train: train_cfg.clone(),
        classifier: clf_cfg.clone(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn fold_errors_name_the_fold() {
        let e = Error::EmptyBag.in_fold(3);
        assert!(matches!(e, Error::Fold { fold: 3, .. }));
    }
}
