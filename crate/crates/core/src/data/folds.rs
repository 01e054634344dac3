use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MilDataset;
use crate::error::{Error, Result};

/// Assignment of every bag to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    /// `assignment[i]` is the fold of bag `i` (dataset order).
    assignment: Vec<usize>,
    bag_ids: Vec<String>,
    k: usize,
    seed: u64,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn fold_of(&self, bag_id: &str) -> Option<usize> {
        self.bag_ids
            .iter()
            .position(|b| b == bag_id)
            .map(|i| self.assignment[i])
    }

    /// Bag indices `(train, test)` for one fold, each in dataset order.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..self.assignment.len()).partition(|&i| self.assignment[i] == fold);
        (train, test)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles bags with `seed`, then deals positives and then negatives
/// round-robin over the folds. Negatives continue where positives stopped,
/// so both per-class counts and fold sizes differ by at most one.
pub fn stratified_kfold(ds: &MilDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidFold(format!("need at least 2 folds, got {k}")));
    }
    let (pos, neg) = (ds.n_positive_bags(), ds.n_negative_bags());
    if pos < k || neg < k {
        return Err(Error::InvalidFold(format!(
            "{k} folds need at least {k} bags per class, have {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut assignment = vec![usize::MAX; ds.len()];
    let mut next = 0usize;
    for want_positive in [true, false] {
        for &i in &order {
            if ds.bags()[i].label.is_positive() == want_positive {
                assignment[i] = next % k;
                next += 1;
            }
        }
    }
    Ok(FoldPlan {
        assignment,
        bag_ids: ds.bags().iter().map(|b| b.id.clone()).collect(),
        k,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Bag, Label};
    use ndarray::Array2;

    fn dataset(n_pos: usize, n_neg: usize) -> MilDataset {
        let bags = (0..n_pos + n_neg)
            .map(|i| Bag {
                id: format!("b{i}"),
                label: Label::from_bool(i < n_pos),
                instances: Array2::zeros((1, 1)),
                instance_labels: None,
            })
            .collect();
        MilDataset::new(bags).unwrap()
    }

    #[test]
    fn musk1_like_counts() {
        let ds = dataset(47, 45);
        let plan = stratified_kfold(&ds, 10, 3).unwrap();
        let sizes = plan.fold_sizes();
        assert!(sizes.iter().all(|s| *s == 9 || *s == 10), "{sizes:?}");
        for f in 0..10 {
            let (_, test) = plan.split(f);
            let pos = test.iter().filter(|&&i| ds.bags()[i].label.is_positive()).count();
            assert!(pos == 4 || pos == 5, "fold {f}: {pos}");
        }
    }

    #[test]
    fn partition_and_determinism() {
        let ds = dataset(12, 15);
        let a = stratified_kfold(&ds, 4, 11).unwrap();
        let b = stratified_kfold(&ds, 4, 11).unwrap();
        let c = stratified_kfold(&ds, 4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.assignment(), c.assignment());
        let mut seen = vec![0; ds.len()];
        for f in 0..4 {
            let (train, test) = a.split(f);
            assert_eq!(train.len() + test.len(), ds.len());
            for i in test {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert_eq!(a.fold_of("b0"), Some(a.assignment()[0]));
    }

    #[test]
    fn too_few_bags() {
        let ds = dataset(3, 10);
        assert!(matches!(stratified_kfold(&ds, 4, 0), Err(Error::InvalidFold(_))));
        assert!(matches!(stratified_kfold(&ds, 1, 0), Err(Error::InvalidFold(_))));
    }
}
