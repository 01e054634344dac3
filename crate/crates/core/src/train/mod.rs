//! Joint training of the two VAEs and the latent-space discriminator.
//!
//! `VAE±` sees instances drawn from every bag, `VAE-` only instances from
//! negative bags. Their posterior means are concatenated and fed to a small
//! softmax classifier that predicts whether the `VAE±` input came from a
//! positive bag. Positive-bag pairs are down-weighted when `VAE-` reconstructs
//! them well.

mod fit;
mod joint;
mod pairs;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

pub use fit::{fit, EpochLoss, Phase};
pub use joint::{discriminate, JointBatch, JointLoss, JointTape};
pub use pairs::{assign_weights, sample_pairs, sample_weight, weight_from_error, InstancePool, TrainingPair};

use crate::codec::{ByteReader, ByteWriter};
use crate::data::{MilDataset, Normalizer};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, Mlp, Parameterized, RmsProp, INIT_STD};
use crate::vae::{separation_proxy, LatentHead, VaeParams, VaeShape};

const MODEL_MAGIC: &[u8; 4] = b"MILM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// Encoder trunk widths (decoder mirrors them).
    pub hidden: Vec<usize>,
    /// Discriminator hidden widths.
    pub clf_hidden: Vec<usize>,
    pub latent_head: LatentHead,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    /// Pairs per epoch as a multiple of the instance count.
    pub pairs_per_epoch: usize,
    pub clf_loss_weight: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden: vec![512, 256],
            clf_hidden: vec![64, 64],
            latent_head: LatentHead::Linear,
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
            batch_size: 32,
            dropout: 0.25,
            epochs: 100,
            pairs_per_epoch: 4,
            clf_loss_weight: 1.0,
            init_std: INIT_STD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidHyperparameter(msg));
        if self.latent_dim == 0 {
            return bad("latent dimension must be >= 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.clf_hidden.contains(&0) {
            return bad(format!("bad layer widths {:?} / {:?}", self.hidden, self.clf_hidden));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.pairs_per_epoch == 0 {
            return bad("pair multiplier must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.clf_loss_weight >= 0.0 && self.clf_loss_weight.is_finite()) {
            return bad(format!("classifier loss weight {}", self.clf_loss_weight));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init std {}", self.init_std));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp {
            lr: self.lr,
            rho: self.rho,
            eps: self.eps,
        }
    }

    pub fn vae_shape(&self, input_dim: usize) -> VaeShape {
        VaeShape {
            input_dim,
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
            latent_head: self.latent_head,
        }
    }
}

/// Trainable parameters: both VAEs and the discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    pub vae_pm: VaeParams,
    pub vae_neg: VaeParams,
    pub clf: Mlp,
}

impl MilParams {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let shape = cfg.vae_shape(input_dim);
        let vae_pm = VaeParams::init(&shape, cfg.dropout, cfg.init_std, rng)?;
        let vae_neg = VaeParams::init(&shape, cfg.dropout, cfg.init_std, rng)?;
        let mut sizes = vec![2 * cfg.latent_dim];
        sizes.extend(&cfg.clf_hidden);
        sizes.push(2);
        let mut acts = vec![Activation::Relu; cfg.clf_hidden.len()];
        acts.push(Activation::Softmax);
        let clf = Mlp::gaussian(&sizes, &acts, cfg.dropout, cfg.init_std, rng)?;
        Ok(Self { vae_pm, vae_neg, clf })
    }

    pub fn latent_dim(&self) -> usize {
        self.vae_pm.latent_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            vae_pm: self.vae_pm.zeros_like(),
            vae_neg: self.vae_neg.zeros_like(),
            clf: self.clf.zeros_like(),
        }
    }
}

impl Parameterized for MilParams {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.vae_pm.param_slices();
        v.extend(self.vae_neg.param_slices());
        v.extend(self.clf.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.vae_pm.param_slices_mut();
        v.extend(self.vae_neg.param_slices_mut());
        v.extend(self.clf.param_slices_mut());
        v
    }
}

/// A trained (or freshly initialized) model with its input normalizer and
/// the reconstruction-error calibration constant of `VAE-`.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub params: MilParams,
    /// Median `VAE-` reconstruction error over negative training instances;
    /// zero until calibrated.
    pub calib_m: f64,
    pub normalizer: Normalizer,
    /// Per-epoch training losses (not serialized).
    pub history: Vec<EpochLoss>,
}

impl MilModel {
    pub fn input_dim(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.params.latent_dim()
    }

    pub fn check_calibrated(&self) -> Result<f64> {
        if self.calib_m > 0.0 && self.calib_m.is_finite() {
            Ok(self.calib_m)
        } else {
            Err(Error::Uncalibrated(self.calib_m))
        }
    }

    fn check_dim(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidShape(format!(
                "model expects {} features, data has {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Normalized copy of raw instance rows.
    pub fn normalize(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(&x)?;
        self.normalizer.transform(&x.to_owned())
    }

    /// `VAE±` posterior means of raw instance rows.
    pub fn encode_pm(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xn = self.normalize(x)?;
        Ok(self.params.vae_pm.encode_infer(xn.view())?.mu)
    }

    /// `VAE-` posterior means of raw instance rows.
    pub fn encode_neg(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xn = self.normalize(x)?;
        Ok(self.params.vae_neg.encode_infer(xn.view())?.mu)
    }

    /// `VAE-` mean-path reconstruction error of raw instance rows.
    pub fn neg_recon_error(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let xn = self.normalize(x)?;
        self.params.vae_neg.mean_path_recon_error(xn.view())
    }

    /// Half squared distance between the mean `VAE±` encoding of true
    /// witnesses and that of negative-bag instances. Needs ground truth.
    pub fn separation_proxy(&self, ds: &MilDataset) -> Result<f64> {
        let truth = ds
            .stacked_truth()
            .ok_or_else(|| Error::InvalidInput("separation proxy needs instance labels".into()))?;
        let (x, labels) = ds.stacked();
        let mu = self.encode_pm(x.view())?;
        let negative: Vec<bool> = labels.iter().map(|l| !l.is_positive()).collect();
        let w = crate::vae::masked_mean(mu.view(), &truth)
            .ok_or_else(|| Error::InvalidInput("no witnesses".into()))?;
        let n = crate::vae::masked_mean(mu.view(), &negative)
            .ok_or_else(|| Error::InvalidInput("no negative instances".into()))?;
        Ok(separation_proxy(&w, &n))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        self.params.vae_pm.write(&mut w);
        self.params.vae_neg.write(&mut w);
        let clf = &self.params.clf;
        w.dim(clf.layers().len());
        w.f64(clf.dropout_rate());
        for layer in clf.layers() {
            w.dim(layer.in_dim());
            w.dim(layer.out_dim());
            w.u8(layer.activation().code());
        }
        for s in clf.param_slices() {
            w.f64s(s);
        }
        w.f64(self.calib_m);
        w.dim(self.normalizer.dim());
        w.f64s(self.normalizer.min());
        w.f64s(self.normalizer.max());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let vae_pm = VaeParams::read(&mut r)?;
        let vae_neg = VaeParams::read(&mut r)?;
        if vae_pm.shape() != vae_neg.shape() {
            return Err(Error::Format("the two VAEs differ in shape".into()));
        }
        let n_layers = r.dim()?;
        if n_layers > 64 {
            return Err(Error::Format(format!("{n_layers} classifier layers")));
        }
        let dropout = r.f64()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (i, o) = (r.dim()?, r.dim()?);
            let act = Activation::from_code(r.u8()?)?;
            layers.push(DenseLayer::zeros(o, i, act)?);
        }
        let mut clf = Mlp::new(layers, dropout).map_err(|e| Error::Format(e.to_string()))?;
        if clf.in_dim() != 2 * vae_pm.latent_dim() || clf.out_dim() != 2 {
            return Err(Error::Format("classifier does not match latent size".into()));
        }
        for s in clf.param_slices_mut() {
            r.fill_f64s(s)?;
        }
        let calib_m = r.f64()?;
        let d = r.dim()?;
        if d != vae_pm.input_dim() {
            return Err(Error::Format("normalizer does not match input size".into()));
        }
        let mut min = vec![0.0; d];
        let mut max = vec![0.0; d];
        r.fill_f64s(&mut min)?;
        r.fill_f64s(&mut max)?;
        r.finish()?;
        Ok(Self {
            params: MilParams { vae_pm, vae_neg, clf },
            calib_m,
            normalizer: Normalizer::new(min, max).map_err(|e| Error::Format(e.to_string()))?,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
