use ndarray::{Array2, Axis};

use super::MilDataset;
use crate::error::{Error, Result};

/// Per-feature min-max scaling to `[0, 1]`, fit on training instances.
///
/// Constant features map to 0.5; values outside the fitted range are clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Normalizer {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.is_empty() {
            return Err(Error::InvalidShape("normalizer bounds differ in length".into()));
        }
        if min.iter().zip(&max).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidInput("normalizer has min > max".into()));
        }
        Ok(Self { min, max })
    }

    pub fn fit(train: &MilDataset) -> Result<Self> {
        let (x, _) = train.stacked();
        Self::fit_matrix(&x)
    }

    pub fn fit_matrix(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("cannot fit a normalizer on no data".into()));
        }
        let min = x
            .axis_iter(Axis(1))
            .map(|c| c.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        let max = x
            .axis_iter(Axis(1))
            .map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Self::new(min, max)
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn scale(&self, j: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[j], self.max[j]);
        if hi == lo {
            0.5
        } else {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::InvalidShape(format!(
                "normalizer fitted on {} features, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.scale(j, *v);
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &MilDataset) -> Result<MilDataset> {
        if ds.dim() != self.dim() {
            return Err(Error::InvalidShape(format!(
                "normalizer fitted on {} features, dataset has {}",
                self.dim(),
                ds.dim()
            )));
        }
        ds.map_instances(|x| self.transform(x).expect("dimension checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scales_clamps_and_handles_constants() {
        let n = Normalizer::fit_matrix(&array![[2.0, 7.0], [4.0, 7.0]]).unwrap();
        let out = n.transform(&array![[3.0, 7.0], [1.0, 100.0], [9.0, -1.0]]).unwrap();
        assert_eq!(out, array![[0.5, 0.5], [0.0, 0.5], [1.0, 0.5]]);
    }

    #[test]
    fn training_data_lands_in_unit_interval() {
        let x = array![[-3.0, 1e6], [0.5, -2.0], [10.0, 3.0]];
        let n = Normalizer::fit_matrix(&x).unwrap();
        let out = n.transform(&x).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[2, 0]], 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let n = Normalizer::fit_matrix(&array![[1.0, 2.0]]).unwrap();
        assert!(n.transform(&array![[1.0]]).is_err());
    }
}
