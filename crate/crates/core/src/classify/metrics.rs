use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(preds: &[Label], labels: &[Label]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut c = Confusion::default();
        for (p, y) in preds.iter().zip(labels) {
            match (p.is_positive(), y.is_positive()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// F1 with `+1` as the positive class; 0 when there are no positives
    /// predicted or present.
    pub f_score: f64,
    pub error_rate: f64,
}

impl Metrics {
    pub fn from_confusion(c: &Confusion) -> Self {
        let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
        let denom = 2 * c.tp + c.fp + c.fn_;
        Self {
            accuracy,
            f_score: if denom == 0 { 0.0 } else { (2 * c.tp) as f64 / denom as f64 },
            error_rate: 1.0 - accuracy,
        }
    }
}

pub fn metrics(preds: &[Label], labels: &[Label]) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    Ok(Metrics::from_confusion(&Confusion::count(preds, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Negative as N, Positive as P};

    #[test]
    fn all_correct() {
        let m = metrics(&[P, N, P], &[P, N, P]).unwrap();
        assert_eq!((m.accuracy, m.error_rate, m.f_score), (1.0, 0.0, 1.0));
    }

    #[test]
    fn one_of_each() {
        let m = metrics(&[P, P, N, N], &[P, N, P, N]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.f_score, 0.5);
    }

    #[test]
    fn no_positives_anywhere() {
        let m = metrics(&[N, N], &[N, N]).unwrap();
        assert_eq!(m.f_score, 0.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(matches!(metrics(&[P], &[P, N]), Err(Error::InvalidInput(_))));
        assert!(matches!(metrics(&[], &[]), Err(Error::InvalidInput(_))));
    }
}
