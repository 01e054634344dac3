use ndarray::ArrayView2;

use crate::data::{Label, MilDataset};
use crate::error::{Error, Result};
use crate::train::MilModel;

/// Fixed-length bag descriptor: `[min.., max.., mean.., std..]` over each
/// latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BagFeature {
    pub values: Vec<f64>,
    pub label: Label,
}

/// Pools per-dimension minimum, maximum, mean and population standard
/// deviation of the rows of `latents`.
pub fn pool_bag(latents: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (n, nz) = latents.dim();
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    let mut out = vec![0.0; 4 * nz];
    for j in 0..nz {
        let col = latents.column(j);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        let mean = (sum / n as f64).clamp(lo, hi);
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        out[j] = lo;
        out[nz + j] = hi;
        out[2 * nz + j] = mean;
        out[3 * nz + j] = var.sqrt();
    }
    Ok(out)
}

/// Encodes every bag with the model's `VAE±` means and pools the result.
pub fn bag_features(model: &MilModel, ds: &MilDataset) -> Result<Vec<BagFeature>> {
    ds.bags()
        .iter()
        .map(|bag| {
            let mu = model.encode_pm(bag.instances.view())?;
            Ok(BagFeature {
                values: pool_bag(mu.view())?,
                label: bag.label,
            })
        })
        .collect()
}

/// Per-feature z-scoring fit on training features. Zero-variance features
/// keep a unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[BagFeature]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot standardize an empty feature set".into()))?;
        let d = first.values.len();
        if features.iter().any(|f| f.values.len() != d) {
            return Err(Error::InvalidShape("bag features differ in length".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(&f.values) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut scale = vec![0.0; d];
        for f in features {
            for ((s, v), m) in scale.iter_mut().zip(&f.values).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in scale.iter_mut() {
            *s = (*s / n).sqrt();
            if !(*s > 0.0) {
                *s = 1.0;
            }
        }
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dim() {
            return Err(Error::InvalidShape(format!(
                "feature has {} values, standardizer expects {}",
                values.len(),
                self.dim()
            )));
        }
        Ok(values
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn transform_all(&self, features: &[BagFeature]) -> Result<Vec<BagFeature>> {
        features
            .iter()
            .map(|f| {
                Ok(BagFeature {
                    values: self.transform(&f.values)?,
                    label: f.label,
                })
            })
            .collect()
    }
}
