//! Variational autoencoder with a Gaussian encoder and a sigmoid decoder.
//!
//! The encoder is a ReLU trunk followed by two heads producing the mean and
//! log-variance of a diagonal Gaussian posterior. The decoder mirrors the trunk
//! and ends in a sigmoid layer, so inputs are expected in `[0, 1]`.
//!
//! Per-instance loss is `KL(q(z|x) || N(0, I)) + BCE(x, decode(z))` with a single
//! reparameterized sample `z = mu + exp(logvar / 2) * eps`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, Mlp, Mode, Parameterized, Tape};

/// Decoder outputs are clipped into `[RECON_CLIP, 1 - RECON_CLIP]` before logs.
pub const RECON_CLIP: f64 = 1e-7;

const VAE_MAGIC: &[u8; 4] = b"MVAE";
const VAE_VERSION: u32 = 1;

/// Activation on the latent mean head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatentHead {
    /// Linear mean and log-variance heads.
    #[default]
    Linear,
    /// ReLU on the mean head, linear log-variance head.
    ReluMu,
}

impl LatentHead {
    pub fn name(self) -> &'static str {
        match self {
            LatentHead::Linear => "linear",
            LatentHead::ReluMu => "relu-mu",
        }
    }

    fn mu_activation(self) -> Activation {
        match self {
            LatentHead::Linear => Activation::Linear,
            LatentHead::ReluMu => Activation::Relu,
        }
    }
}

impl std::str::FromStr for LatentHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(LatentHead::Linear),
            "relu-mu" => Ok(LatentHead::ReluMu),
            other => Err(Error::InvalidHyperparameter(format!(
                "latent head must be `linear` or `relu-mu`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeShape {
    pub input_dim: usize,
    /// Encoder trunk widths; the decoder uses them in reverse.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub latent_head: LatentHead,
}

impl VaeShape {
    /// The `[512, 256]` trunk.
    pub fn standard(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![512, 256],
            latent_dim,
            latent_head: LatentHead::Linear,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "invalid VAE shape d={} hidden={:?} n_z={}",
                self.input_dim, self.hidden, self.latent_dim
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentPosterior {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() || mu.is_empty() {
            return Err(Error::InvalidShape(format!(
                "mu has {} entries, logvar {}",
                mu.len(),
                logvar.len()
            )));
        }
        if !mu.iter().chain(&logvar).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("posterior has non-finite entries".into()));
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `KL(self || N(0, I))`.
    pub fn kl_to_prior(&self) -> f64 {
        kl_to_prior(&self.mu, &self.logvar)
    }

    /// `KL(self || other)` between diagonal Gaussians.
    pub fn kl_to(&self, other: &LatentPosterior) -> Result<f64> {
        gaussian_kl(self, other)
    }

    /// Draws `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`.
    pub fn reparameterize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.logvar)
            .map(|(&m, &lv)| {
                let e: f64 = rng.sample(StandardNormal);
                m + (0.5 * lv).exp() * e
            })
            .collect()
    }
}

/// `0.5 * sum(mu^2 + exp(logvar) - logvar - 1)`.
pub fn kl_to_prior(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Closed-form `KL(p1 || p2)` for diagonal Gaussians:
/// `0.5 * [log|S2|/|S1| - n + tr(S2^-1 S1) + (mu2 - mu1)^T S2^-1 (mu2 - mu1)]`.
pub fn gaussian_kl(p1: &LatentPosterior, p2: &LatentPosterior) -> Result<f64> {
    if p1.dim() != p2.dim() {
        return Err(Error::InvalidShape(format!(
            "posteriors of dimension {} and {}",
            p1.dim(),
            p2.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..p1.dim() {
        let (m1, lv1) = (p1.mu[i], p1.logvar[i]);
        let (m2, lv2) = (p2.mu[i], p2.logvar[i]);
        let inv_var2 = (-lv2).exp();
        let diff = m2 - m1;
        acc += (lv2 - lv1) - 1.0 + (lv1 - lv2).exp() + diff * diff * inv_var2;
    }
    Ok(0.5 * acc)
}

/// Half the squared Euclidean distance between two mean vectors; the
/// unit-covariance case of [`gaussian_kl`].
pub fn separation_proxy(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

fn bce_row(x: ArrayView1<f64>, xhat: ArrayView1<f64>) -> f64 {
    x.iter()
        .zip(xhat.iter())
        .map(|(&xi, &yi)| {
            let y = yi.clamp(RECON_CLIP, 1.0 - RECON_CLIP);
            -(xi * y.ln() + (1.0 - xi) * (1.0 - y).ln())
        })
        .sum()
}

/// Bernoulli cross-entropy summed over dimensions. `x` must lie in `[0, 1]`.
pub fn recon_loss(x: &[f64], xhat: &[f64]) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::InvalidShape(format!(
            "input has {} features, reconstruction {}",
            x.len(),
            xhat.len()
        )));
    }
    if let Some(bad) = x.iter().chain(xhat).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("value {bad} outside [0, 1]")));
    }
    Ok(bce_row(ArrayView1::from(x), ArrayView1::from(xhat)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossBreakdown {
    pub kl: f64,
    pub recon: f64,
    pub total: f64,
}

impl VaeLossBreakdown {
    fn new(kl: f64, recon: f64) -> Self {
        Self {
            kl,
            recon,
            total: kl + recon,
        }
    }
}

/// Encoder output for a batch; row `i` is instance `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl EncodedBatch {
    pub fn posterior(&self, i: usize) -> LatentPosterior {
        LatentPosterior {
            mu: self.mu.row(i).to_vec(),
            logvar: self.logvar.row(i).to_vec(),
        }
    }
}

/// Forward values of a training pass, needed by [`VaeParams::backward`].
#[derive(Debug, Clone, Default)]
pub struct VaeTape {
    encoder: Tape,
    mu_head: Tape,
    logvar_head: Tape,
    decoder: Tape,
    input: Option<Array2<f64>>,
    mu: Array2<f64>,
    logvar: Array2<f64>,
    eps: Array2<f64>,
    xhat: Array2<f64>,
}

impl VaeTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mu(&self) -> &Array2<f64> {
        &self.mu
    }

    pub fn eps(&self) -> &Array2<f64> {
        &self.eps
    }
}

/// Per-row loss terms of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeBatchLoss {
    pub kl: Array1<f64>,
    pub recon: Array1<f64>,
}

impl VaeBatchLoss {
    pub fn row(&self, i: usize) -> VaeLossBreakdown {
        VaeLossBreakdown::new(self.kl[i], self.recon[i])
    }

    pub fn total(&self) -> Array1<f64> {
        &self.kl + &self.recon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    encoder: Mlp,
    mu_head: DenseLayer,
    logvar_head: DenseLayer,
    decoder: Mlp,
    latent_head: LatentHead,
}

impl VaeParams {
    /// Gaussian weights with the given std and zero biases. Dropout follows
    /// every hidden ReLU layer of the trunk and decoder.
    pub fn init<R: Rng + ?Sized>(shape: &VaeShape, dropout: f64, std: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut enc_sizes = vec![shape.input_dim];
        enc_sizes.extend(&shape.hidden);
        let enc_acts = vec![Activation::Relu; shape.hidden.len()];
        let encoder = Mlp::gaussian(&enc_sizes, &enc_acts, dropout, std, rng)?;
        let h = *shape.hidden.last().expect("non-empty");
        let mu_head = DenseLayer::gaussian(shape.latent_dim, h, shape.latent_head.mu_activation(), std, rng)?;
        let logvar_head = DenseLayer::gaussian(shape.latent_dim, h, Activation::Linear, std, rng)?;
        let mut dec_sizes = vec![shape.latent_dim];
        dec_sizes.extend(shape.hidden.iter().rev());
        dec_sizes.push(shape.input_dim);
        let mut dec_acts = vec![Activation::Relu; shape.hidden.len()];
        dec_acts.push(Activation::Sigmoid);
        let decoder = Mlp::gaussian(&dec_sizes, &dec_acts, dropout, std, rng)?;
        Ok(Self {
            encoder,
            mu_head,
            logvar_head,
            decoder,
            latent_head: shape.latent_head,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(shape: &VaeShape, dropout: f64) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut v = Self::init(shape, dropout, 1.0, &mut rng)?;
        v.fill(0.0);
        Ok(v)
    }

    pub fn shape(&self) -> VaeShape {
        let enc = self.encoder.sizes();
        VaeShape {
            input_dim: enc[0],
            hidden: enc[1..].to_vec(),
            latent_dim: self.mu_head.out_dim(),
            latent_head: self.latent_head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.out_dim()
    }

    pub fn latent_head(&self) -> LatentHead {
        self.latent_head
    }

    pub fn dropout_rate(&self) -> f64 {
        self.encoder.dropout_rate()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn mu_head(&self) -> &DenseLayer {
        &self.mu_head
    }

    pub fn logvar_head(&self) -> &DenseLayer {
        &self.logvar_head
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            mu_head: self.mu_head.zeros_like(),
            logvar_head: self.logvar_head.zeros_like(),
            decoder: self.decoder.zeros_like(),
            latent_head: self.latent_head,
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidShape(format!(
                "VAE expects {} features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Posterior parameters for a batch. In training mode the trunk and both
    /// heads are recorded on `tape`.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
        tape: &mut VaeTape,
    ) -> Result<EncodedBatch> {
        self.check_input(&x)?;
        let h = self.encoder.forward(x, mode, rng, &mut tape.encoder)?;
        let mu = self.mu_head.forward(h.view(), mode, &mut tape.mu_head)?;
        let logvar = self.logvar_head.forward(h.view(), mode, &mut tape.logvar_head)?;
        Ok(EncodedBatch { mu, logvar })
    }

    /// Deterministic encoding.
    pub fn encode_infer(&self, x: ArrayView2<f64>) -> Result<EncodedBatch> {
        self.check_input(&x)?;
        let h = self.encoder.infer(x)?;
        let mut scratch = Tape::new();
        Ok(EncodedBatch {
            mu: self.mu_head.forward(h.view(), Mode::Infer, &mut scratch)?,
            logvar: self.logvar_head.forward(h.view(), Mode::Infer, &mut scratch)?,
        })
    }

    pub fn decode<R: Rng + ?Sized>(
        &self,
        z: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
        tape: &mut VaeTape,
    ) -> Result<Array2<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::InvalidShape(format!(
                "decoder expects {} latent values, got {}",
                self.latent_dim(),
                z.ncols()
            )));
        }
        self.decoder.forward(z, mode, rng, &mut tape.decoder)
    }

    pub fn decode_infer(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::InvalidShape(format!(
                "decoder expects {} latent values, got {}",
                self.latent_dim(),
                z.ncols()
            )));
        }
        self.decoder.infer(z)
    }

    /// Reconstruction error of each row when decoding the posterior mean.
    pub fn mean_path_recon_error(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let enc = self.encode_infer(x)?;
        let xhat = self.decode_infer(enc.mu.view())?;
        Ok(x
            .axis_iter(Axis(0))
            .zip(xhat.axis_iter(Axis(0)))
            .map(|(xr, yr)| bce_row(xr, yr))
            .collect())
    }

    /// Training-style forward pass over a batch.
    ///
    /// `eps` fixes the reparameterization noise; when `None` it is drawn from
    /// `rng` after the encoder's dropout masks.
    pub fn forward_loss<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
        eps: Option<&Array2<f64>>,
        tape: &mut VaeTape,
    ) -> Result<VaeBatchLoss> {
        *tape = VaeTape::new();
        let enc = self.encode(x, mode, rng, tape)?;
        let eps = match eps {
            Some(e) => {
                if e.dim() != enc.mu.dim() {
                    return Err(Error::InvalidShape(format!(
                        "noise {:?} does not match latent batch {:?}",
                        e.dim(),
                        enc.mu.dim()
                    )));
                }
                e.clone()
            }
            None => Array2::from_shape_simple_fn(enc.mu.raw_dim(), || rng.sample(StandardNormal)),
        };
        let sigma = enc.logvar.mapv(|lv| (0.5 * lv).exp());
        let z = &enc.mu + &(&sigma * &eps);
        let xhat = self.decode(z.view(), mode, rng, tape)?;

        let kl = Array1::from_iter(
            enc.mu
                .axis_iter(Axis(0))
                .zip(enc.logvar.axis_iter(Axis(0)))
                .map(|(m, lv)| kl_to_prior(m.as_slice().expect("row"), lv.as_slice().expect("row"))),
        );
        let recon = Array1::from_iter(
            x.axis_iter(Axis(0))
                .zip(xhat.axis_iter(Axis(0)))
                .map(|(xr, yr)| bce_row(xr, yr)),
        );
        if mode == Mode::Train {
            tape.input = Some(x.to_owned());
            tape.mu = enc.mu;
            tape.logvar = enc.logvar;
            tape.eps = eps;
            tape.xhat = xhat;
        }
        Ok(VaeBatchLoss { kl, recon })
    }

    /// Distance of the recorded pass from the nearest ReLU kink.
    pub fn relu_margin(&self, tape: &VaeTape) -> f64 {
        let head = tape
            .mu_head
            .records
            .last()
            .map_or(f64::INFINITY, |r| self.mu_head.relu_margin(r));
        self.encoder
            .relu_margin(&tape.encoder)
            .min(head)
            .min(self.decoder.relu_margin(&tape.decoder))
    }

    /// Reverse pass for `sum_i scale[i] * loss_i + <extra_mu_grad, mu>`.
    ///
    /// `extra_mu_grad` carries gradient arriving at the posterior means from
    /// outside the VAE (the discriminator). Returns parameter gradients.
    pub fn backward(
        &self,
        tape: &VaeTape,
        scale: &[f64],
        extra_mu_grad: Option<&Array2<f64>>,
    ) -> Result<VaeParams> {
        let x = tape.input.as_ref().ok_or(Error::NoGraph)?;
        let n = x.nrows();
        if scale.len() != n {
            return Err(Error::InvalidShape(format!("{} scales for a batch of {n}", scale.len())));
        }
        let scale_col = ArrayView2::from_shape((n, 1), scale).expect("column");

        // d/dxhat of the clipped BCE
        let mut g_xhat = Array2::zeros(x.raw_dim());
        ndarray::Zip::from(&mut g_xhat)
            .and(x)
            .and(&tape.xhat)
            .for_each(|g, &xi, &yi| {
                *g = if yi > RECON_CLIP && yi < 1.0 - RECON_CLIP {
                    -xi / yi + (1.0 - xi) / (1.0 - yi)
                } else {
                    0.0
                };
            });
        g_xhat *= &scale_col;
        let (g_decoder, g_z) = self.decoder.backward(&tape.decoder, &g_xhat)?;

        let var = tape.logvar.mapv(f64::exp);
        let sigma = tape.logvar.mapv(|lv| (0.5 * lv).exp());
        let mut g_mu = &g_z + &(&tape.mu * &scale_col);
        if let Some(extra) = extra_mu_grad {
            if extra.dim() != g_mu.dim() {
                return Err(Error::InvalidShape("extra mean gradient shape".into()));
            }
            g_mu += extra;
        }
        let g_logvar = &(&(&g_z * &tape.eps) * &sigma) * 0.5 + &(&(var - 1.0) * &scale_col) * 0.5;

        let (g_mu_head, g_h1) = self.mu_head.backward(&tape.mu_head, &g_mu)?;
        let (g_logvar_head, g_h2) = self.logvar_head.backward(&tape.logvar_head, &g_logvar)?;
        let (g_encoder, _) = self.encoder.backward(&tape.encoder, &(g_h1 + g_h2))?;
        Ok(VaeParams {
            encoder: g_encoder,
            mu_head: g_mu_head,
            logvar_head: g_logvar_head,
            decoder: g_decoder,
            latent_head: self.latent_head,
        })
    }

    /// Loss breakdown for a single instance.
    pub fn vae_loss<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        mode: Mode,
        rng: &mut R,
        tape: &mut VaeTape,
    ) -> Result<VaeLossBreakdown> {
        if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("feature {bad} outside [0, 1]")));
        }
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidShape(e.to_string()))?;
        Ok(self.forward_loss(view, mode, rng, None, tape)?.row(0))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.write(&mut w);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let v = Self::read(&mut r)?;
        r.finish()?;
        Ok(v)
    }

    /// Header (magic, version, d, n_z, head, dropout, trunk widths) then every
    /// parameter as little-endian f64 in `param_slices` order.
    pub(crate) fn write(&self, w: &mut ByteWriter) {
        let shape = self.shape();
        w.bytes(VAE_MAGIC);
        w.u32(VAE_VERSION);
        w.dim(shape.input_dim);
        w.dim(shape.latent_dim);
        w.u8(match shape.latent_head {
            LatentHead::Linear => 0,
            LatentHead::ReluMu => 1,
        });
        w.f64(self.dropout_rate());
        w.dim(shape.hidden.len());
        for &h in &shape.hidden {
            w.dim(h);
        }
        for s in self.param_slices() {
            w.f64s(s);
        }
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(VAE_MAGIC)?;
        let version = r.u32()?;
        if version != VAE_VERSION {
            return Err(Error::Format(format!("unsupported VAE version {version}")));
        }
        let input_dim = r.dim()?;
        let latent_dim = r.dim()?;
        let latent_head = match r.u8()? {
            0 => LatentHead::Linear,
            1 => LatentHead::ReluMu,
            other => return Err(Error::Format(format!("unknown latent head code {other}"))),
        };
        let dropout = r.f64()?;
        let n_hidden = r.dim()?;
        if n_hidden > 64 {
            return Err(Error::Format(format!("{n_hidden} hidden layers")));
        }
        let hidden = (0..n_hidden).map(|_| r.dim()).collect::<Result<Vec<_>>>()?;
        let shape = VaeShape {
            input_dim,
            hidden,
            latent_dim,
            latent_head,
        };
        let mut v = Self::zeros(&shape, dropout).map_err(|e| Error::Format(e.to_string()))?;
        for s in v.param_slices_mut() {
            r.fill_f64s(s)?;
        }
        Ok(v)
    }
}

impl Parameterized for VaeParams {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.param_slices();
        v.extend(self.mu_head.param_slices());
        v.extend(self.logvar_head.param_slices());
        v.extend(self.decoder.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.param_slices_mut();
        v.extend(self.mu_head.param_slices_mut());
        v.extend(self.logvar_head.param_slices_mut());
        v.extend(self.decoder.param_slices_mut());
        v
    }
}

/// Empirical latent means split by bag class.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMeans {
    pub all: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Fraction of rows that are positive.
    pub positive_fraction: f64,
}

impl MixtureMeans {
    /// Rows of `latents` with `positive[i]` marking positive-bag instances.
    pub fn compute(latents: ArrayView2<f64>, positive: &[bool]) -> Result<Self> {
        let n = latents.nrows();
        if positive.len() != n {
            return Err(Error::InvalidShape(format!("{} labels for {n} rows", positive.len())));
        }
        let n_pos = positive.iter().filter(|&&p| p).count();
        if n_pos == 0 || n_pos == n {
            return Err(Error::InvalidInput("both classes are needed for mixture means".into()));
        }
        let dim = latents.ncols();
        let mut all = vec![0.0; dim];
        let mut pos = vec![0.0; dim];
        let mut neg = vec![0.0; dim];
        for (row, &p) in latents.axis_iter(Axis(0)).zip(positive) {
            let target = if p { &mut pos } else { &mut neg };
            for j in 0..dim {
                all[j] += row[j];
                target[j] += row[j];
            }
        }
        all.iter_mut().for_each(|v| *v /= n as f64);
        pos.iter_mut().for_each(|v| *v /= n_pos as f64);
        neg.iter_mut().for_each(|v| *v /= (n - n_pos) as f64);
        Ok(Self {
            all,
            positive: pos,
            negative: neg,
            positive_fraction: n_pos as f64 / n as f64,
        })
    }

    /// `mean_all - mean_neg` per dimension.
    pub fn shift_all(&self) -> Vec<f64> {
        self.all.iter().zip(&self.negative).map(|(a, n)| a - n).collect()
    }

    /// `p * (mean_pos - mean_neg)` per dimension.
    pub fn shift_weighted(&self) -> Vec<f64> {
        self.positive
            .iter()
            .zip(&self.negative)
            .map(|(p, n)| self.positive_fraction * (p - n))
            .collect()
    }
}

/// Means of selected rows.
pub fn masked_mean(latents: ArrayView2<f64>, mask: &[bool]) -> Option<Vec<f64>> {
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return None;
    }
    let mut mean = vec![0.0; latents.ncols()];
    for &i in &rows {
        for (m, v) in mean.iter_mut().zip(latents.slice(s![i, ..])) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    Some(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{compare, numeric_gradient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_shape() -> VaeShape {
        VaeShape {
            input_dim: 4,
            hidden: vec![6, 5],
            latent_dim: 2,
            latent_head: LatentHead::Linear,
        }
    }

    #[test]
    fn zero_network_encodes_to_prior() {
        let v = VaeParams::zeros(&small_shape(), 0.0).unwrap();
        let x = ndarray::array![[0.1, 0.9, 0.5, 0.3]];
        let enc = v.encode_infer(x.view()).unwrap();
        assert!(enc.mu.iter().all(|&m| m == 0.0));
        assert!(enc.logvar.iter().all(|&m| m == 0.0));
        assert_eq!(enc.mu.dim(), (1, 2));
        let xhat = v.decode_infer(enc.mu.view()).unwrap();
        assert!(xhat.iter().all(|&y| y == 0.5));
    }

    #[test]
    fn zero_network_loss() {
        let v = VaeParams::zeros(&small_shape(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = v.vae_loss(&[0.5; 4], Mode::Infer, &mut rng, &mut VaeTape::new()).unwrap();
        assert_eq!(l.kl, 0.0);
        assert!((l.recon - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.total, l.kl + l.recon);
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_to_prior(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(kl_to_prior(&[1.0, 0.0], &[0.0, 0.0]), 0.5);
        let a = LatentPosterior::new(vec![0.3, -1.0], vec![0.2, -0.4]).unwrap();
        assert_eq!(a.kl_to(&a).unwrap(), 0.0);
        let p1 = LatentPosterior::new(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let p2 = LatentPosterior::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(p1.kl_to(&p2).unwrap(), 1.0);
        let p3 = LatentPosterior::new(vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(p1.kl_to(&p3), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn recon_loss_values() {
        assert!((recon_loss(&[0.5], &[0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = recon_loss(&[0.0, 1.0, 1.0], &[0.0, 1.0, 1.0]).unwrap();
        let expected = -3.0 * (1.0 - RECON_CLIP).ln();
        assert!((perfect - expected).abs() < 1e-15);
        assert!(perfect < 1e-6);
        assert!(matches!(recon_loss(&[1.5], &[0.5]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn reparameterize_degenerate_variance() {
        let p = LatentPosterior::new(vec![0.7, -2.0], vec![-50.0, -50.0]).unwrap();
        let z = p.reparameterize(&mut ChaCha8Rng::seed_from_u64(1));
        assert!((z[0] - 0.7).abs() < 1e-9 && (z[1] + 2.0).abs() < 1e-9);
        let a = p.reparameterize(&mut ChaCha8Rng::seed_from_u64(9));
        let b = p.reparameterize(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_moments() {
        let p = LatentPosterior::new(vec![0.0], vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 1_000_000;
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..n {
            let z = p.reparameterize(&mut rng)[0];
            s += z;
            ss += z * z;
        }
        let mean = s / n as f64;
        let var = ss / n as f64 - mean * mean;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn vae_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut v = VaeParams::init(&small_shape(), 0.0, 0.5, &mut rng).unwrap();
        let x = ndarray::array![[0.1, 0.8, 0.4, 0.6], [0.9, 0.2, 0.3, 0.05]];
        let eps = ndarray::array![[0.3, -1.1], [0.5, 0.7]];
        let mut tape = VaeTape::new();
        v.forward_loss(x.view(), Mode::Train, &mut rng, Some(&eps), &mut tape).unwrap();
        let grads = v.backward(&tape, &[1.0, 1.0], None).unwrap();
        let numeric = numeric_gradient(&mut v, 1e-5, |p| {
            let mut t = VaeTape::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            p.forward_loss(x.view(), Mode::Infer, &mut r, Some(&eps), &mut t)
                .unwrap()
                .total()
                .sum()
        });
        let report = compare(&grads, &numeric);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut shape = small_shape();
        shape.latent_head = LatentHead::ReluMu;
        let v = VaeParams::init(&shape, 0.25, 0.01, &mut rng).unwrap();
        let back = VaeParams::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(v, back);
        let mut bad = v.to_bytes();
        bad[0] = b'X';
        assert!(matches!(VaeParams::from_bytes(&bad), Err(Error::Format(_))));
        assert!(VaeParams::from_bytes(&v.to_bytes()[..20]).is_err());
    }

    #[test]
    fn mixture_identity_small() {
        let lat = ndarray::array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [2.0, 2.0], [-1.0, 4.0]];
        let pos = [true, false, true, false, false];
        let m = MixtureMeans::compute(lat.view(), &pos).unwrap();
        for (a, b) in m.shift_all().iter().zip(m.shift_weighted()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(MixtureMeans::compute(lat.view(), &[false; 5]).is_err());
    }
}
