use super::BagFeature;
use crate::data::Label;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority label among the `k` training points closest to `query` in
/// Euclidean distance. Distance ties are resolved by training order; vote
/// ties go to the single nearest neighbour.
///
/// Features are compared as given; standardize them first.
pub fn knn_predict(train: &[BagFeature], query: &[f64], k: usize) -> Result<Label> {
    if k == 0 || k > train.len() {
        return Err(Error::InvalidHyperparameter(format!(
            "k = {k} with {} training bags",
            train.len()
        )));
    }
    if let Some(bad) = train.iter().find(|f| f.values.len() != query.len()) {
        return Err(Error::InvalidShape(format!(
            "query has {} features, training bag has {}",
            query.len(),
            bad.values.len()
        )));
    }
    let mut order: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, f)| (sq_dist(&f.values, query), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let pos = order[..k].iter().filter(|(_, i)| train[*i].label.is_positive()).count();
    let neg = k - pos;
    Ok(match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Label::Positive,
        std::cmp::Ordering::Less => Label::Negative,
        std::cmp::Ordering::Equal => train[order[0].1].label,
    })
}
