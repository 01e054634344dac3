//! Bag-level classification on pooled latent statistics.

mod boost;
mod knn;
mod metrics;
mod neural;
mod pool;

use std::fmt;
use std::str::FromStr;

pub use boost::{adaboost_fit, Stump, StumpEnsemble, ALPHA_CLIP, DEFAULT_ROUNDS};
pub use knn::{knn_predict, DEFAULT_K};
pub use metrics::{metrics, Confusion, Metrics};
pub use neural::{NnClassifier, NnConfig};
pub use pool::{bag_features, pool_bag, BagFeature, Standardizer};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassifierKind {
    #[default]
    Knn,
    Nn,
    Adaboost,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Knn, ClassifierKind::Nn, ClassifierKind::Adaboost];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Knn => "knn",
            ClassifierKind::Nn => "nn",
            ClassifierKind::Adaboost => "adaboost",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "knn" => Ok(ClassifierKind::Knn),
            "nn" => Ok(ClassifierKind::Nn),
            "adaboost" => Ok(ClassifierKind::Adaboost),
            other => Err(Error::InvalidHyperparameter(format!(
                "unknown classifier '{other}' (expected knn, nn or adaboost)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub knn_k: usize,
    pub nn: NnConfig,
    pub boost_rounds: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Knn,
            knn_k: DEFAULT_K,
            nn: NnConfig::default(),
            boost_rounds: DEFAULT_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Fitted {
    Knn { train: Vec<BagFeature>, k: usize },
    Nn(NnClassifier),
    Boost(StumpEnsemble),
}

/// A classifier together with the standardizer fit on its training bags.
#[derive(Debug, Clone, PartialEq)]
pub struct BagClassifier {
    standardizer: Standardizer,
    fitted: Fitted,
}

impl BagClassifier {
    pub fn fit(train: &[BagFeature], cfg: &ClassifierConfig) -> Result<Self> {
        let standardizer = Standardizer::fit(train)?;
        let train = standardizer.transform_all(train)?;
        let fitted = match cfg.kind {
            ClassifierKind::Knn => {
                if cfg.knn_k == 0 || cfg.knn_k > train.len() {
                    return Err(Error::InvalidHyperparameter(format!(
                        "k = {} with {} training bags",
                        cfg.knn_k,
                        train.len()
                    )));
                }
                Fitted::Knn { train, k: cfg.knn_k }
            }
            ClassifierKind::Nn => Fitted::Nn(NnClassifier::fit(&train, &cfg.nn)?),
            ClassifierKind::Adaboost => Fitted::Boost(adaboost_fit(&train, cfg.boost_rounds)?),
        };
        Ok(Self { standardizer, fitted })
    }

    pub fn predict(&self, values: &[f64]) -> Result<Label> {
        let x = self.standardizer.transform(values)?;
        match &self.fitted {
            Fitted::Knn { train, k } => knn_predict(train, &x, *k),
            Fitted::Nn(clf) => clf.predict(&x),
            Fitted::Boost(ens) => Ok(ens.predict(&x)),
        }
    }

    pub fn predict_all(&self, features: &[BagFeature]) -> Result<Vec<Label>> {
        features.iter().map(|f| self.predict(&f.values)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trip() {
        for k in ClassifierKind::ALL {
            assert_eq!(k.name().parse::<ClassifierKind>().unwrap(), k);
        }
        assert!("svm".parse::<ClassifierKind>().is_err());
    }

    #[test]
    fn standardized_pipeline() {
        // second feature has a huge scale but carries no signal
        let train: Vec<BagFeature> = (0..12)
            .map(|i| BagFeature {
                values: vec![if i % 2 == 0 { 1.0 } else { 0.0 } + 0.01 * i as f64, 1e6 * ((i * 7) % 5) as f64],
                label: Label::from_bool(i % 2 == 0),
            })
            .collect();
        for kind in ClassifierKind::ALL {
            let cfg = ClassifierConfig { kind, knn_k: 1, ..ClassifierConfig::default() };
            let clf = BagClassifier::fit(&train, &cfg).unwrap();
            let preds = clf.predict_all(&train).unwrap();
            let labels: Vec<Label> = train.iter().map(|f| f.label).collect();
            assert_eq!(preds, labels, "{kind}");
        }
    }
}
