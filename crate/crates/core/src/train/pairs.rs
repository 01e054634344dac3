use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::data::{Label, MilDataset};
use crate::error::{Error, Result};
use crate::vae::VaeParams;

/// Stacked instances of a dataset with their bag labels.
#[derive(Debug, Clone)]
pub struct InstancePool {
    pub x: Array2<f64>,
    pub labels: Vec<Label>,
    negative_rows: Vec<usize>,
}

impl InstancePool {
    pub fn from_dataset(ds: &MilDataset) -> Self {
        let (x, labels) = ds.stacked();
        let negative_rows = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_positive())
            .map(|(i, _)| i)
            .collect();
        Self {
            x,
            labels,
            negative_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn negative_rows(&self) -> &[usize] {
        &self.negative_rows
    }

    pub fn negatives(&self) -> Array2<f64> {
        self.x.select(ndarray::Axis(0), &self.negative_rows)
    }
}

/// One training example: `any` feeds `VAE±`, `neg` feeds `VAE-`.
/// Both are row indices into an [`InstancePool`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingPair {
    pub any: usize,
    pub neg: usize,
    /// True iff `any` comes from a positive bag.
    pub target: bool,
    pub weight: f64,
}

/// Draws `r * N` pairs: `any` uniform over all instances, `neg` uniform over
/// negative-bag instances. Weights start at 1.
pub fn sample_pairs<R: Rng + ?Sized>(pool: &InstancePool, r: usize, rng: &mut R) -> Result<Vec<TrainingPair>> {
    if pool.negative_rows.is_empty() {
        return Err(Error::UnsatisfiablePairing("dataset has no negative bags".into()));
    }
    if r == 0 {
        return Err(Error::InvalidHyperparameter("pair multiplier must be >= 1".into()));
    }
    let n = pool.len();
    Ok((0..r * n)
        .map(|_| {
            let any = rng.gen_range(0..n);
            let neg = pool.negative_rows[rng.gen_range(0..pool.negative_rows.len())];
            TrainingPair {
                any,
                neg,
                target: pool.labels[any].is_positive(),
                weight: 1.0,
            }
        })
        .collect())
}

/// `e / (e + m)`.
pub fn weight_from_error(e: f64, m: f64) -> Result<f64> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Uncalibrated(m));
    }
    if !(e >= 0.0) {
        return Err(Error::InvalidInput(format!("reconstruction error {e}")));
    }
    Ok(e / (e + m))
}

/// Classifier weight of a positive-bag instance from its `VAE-` mean-path
/// reconstruction error. `x` must be normalized.
pub fn sample_weight(x: &[f64], vae_neg: &VaeParams, m: f64) -> Result<f64> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Uncalibrated(m));
    }
    let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidShape(e.to_string()))?;
    let e = vae_neg.mean_path_recon_error(view)?[0];
    weight_from_error(e, m)
}

/// Sets pair weights from per-instance errors: positive-origin pairs get
/// `e / (e + m)`, negative-origin pairs get exactly 1.
pub fn assign_weights(pairs: &mut [TrainingPair], errors: &[f64], m: f64) -> Result<()> {
    for p in pairs.iter_mut() {
        p.weight = if p.target {
            weight_from_error(errors[p.any], m)?
        } else {
            1.0
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Bag;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(labels: &[bool]) -> InstancePool {
        let bags = labels
            .iter()
            .enumerate()
            .map(|(i, &p)| Bag {
                id: format!("b{i}"),
                label: Label::from_bool(p),
                instances: Array2::from_elem((2, 3), i as f64),
                instance_labels: None,
            })
            .collect();
        InstancePool::from_dataset(&MilDataset::new(bags).unwrap())
    }

    #[test]
    fn only_negative_bags_give_zero_targets() {
        let p = pool(&[false, false, false]);
        let pairs = sample_pairs(&p, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pairs.len(), 18);
        assert!(pairs.iter().all(|q| !q.target));
    }

    #[test]
    fn no_negative_bags_is_unsatisfiable() {
        let p = pool(&[true, true]);
        assert!(matches!(
            sample_pairs(&p, 1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::UnsatisfiablePairing(_))
        ));
    }

    #[test]
    fn neg_side_always_negative_and_deterministic() {
        let p = pool(&[true, false, true, false]);
        let a = sample_pairs(&p, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_pairs(&p, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for q in &a {
            assert!(!p.labels[q.neg].is_positive());
            assert_eq!(q.target, p.labels[q.any].is_positive());
        }
    }

    #[test]
    fn weight_formula_endpoints() {
        assert_eq!(weight_from_error(0.0, 2.0).unwrap(), 0.0);
        assert_eq!(weight_from_error(2.0, 2.0).unwrap(), 0.5);
        assert!(matches!(weight_from_error(1.0, 0.0), Err(Error::Uncalibrated(_))));
        assert!(matches!(weight_from_error(1.0, -1.0), Err(Error::Uncalibrated(_))));
    }

    #[test]
    fn weights_only_touch_positive_pairs() {
        let mut pairs = vec![
            TrainingPair { any: 0, neg: 1, target: true, weight: 1.0 },
            TrainingPair { any: 1, neg: 1, target: false, weight: 0.3 },
        ];
        assign_weights(&mut pairs, &[3.0, 100.0], 1.0).unwrap();
        assert!((pairs[0].weight - 0.75).abs() < 1e-12);
        assert_eq!(pairs[1].weight, 1.0);
    }
}
