//! Numeric self-checks: finite-difference gradient checks, Monte-Carlo KL
//! estimates and scalar-loop oracles for pooling and metrics.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classify::{metrics, pool_bag, Confusion};
use crate::data::Label;
use crate::nn::gradcheck::{compare, numeric_gradient, GradCheckReport, DEFAULT_STEP};
use crate::nn::{Activation, DenseLayer, Mlp, Mode, Parameterized, Tape};
use crate::seed::rng_for;
use crate::train::{JointBatch, JointTape, MilParams, TrainConfig};
use crate::vae::{gaussian_kl, kl_to_prior, separation_proxy, LatentHead, LatentPosterior, VaeParams, VaeShape, VaeTape};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const KL_TOLERANCE: f64 = 0.01;
/// Configurations whose recorded pass comes closer than this to a ReLU kink
/// are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: u64 = 100;
/// Closed-form KL below this is not compared against Monte Carlo, whose
/// relative noise grows as the divergence shrinks.
const MIN_MC_KL: f64 = 0.5;

/// Network piece exercised by a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Dense(Activation),
    DropoutMlp,
    Vae,
    Joint,
}

impl GradTarget {
    pub const ALL: [GradTarget; 7] = [
        GradTarget::Dense(Activation::Relu),
        GradTarget::Dense(Activation::Sigmoid),
        GradTarget::Dense(Activation::Linear),
        GradTarget::Dense(Activation::Softmax),
        GradTarget::DropoutMlp,
        GradTarget::Vae,
        GradTarget::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Dense(Activation::Relu) => "dense-relu",
            GradTarget::Dense(Activation::Sigmoid) => "dense-sigmoid",
            GradTarget::Dense(Activation::Linear) => "dense-linear",
            GradTarget::Dense(Activation::Softmax) => "dense-softmax",
            GradTarget::DropoutMlp => "mlp-dropout",
            GradTarget::Vae => "vae-loss",
            GradTarget::Joint => "joint-loss",
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng))
}

fn unit_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(0.02..0.98))
}

/// Adds independent Gaussian noise to every parameter, biases included.
fn jitter<P: Parameterized>(p: &mut P, std: f64, rng: &mut ChaCha8Rng) {
    for s in p.param_slices_mut() {
        for v in s.iter_mut() {
            *v += std * normal(rng);
        }
    }
}

fn corrupt<P: Parameterized>(g: &mut P) {
    let first = &mut g.param_slices_mut()[0][0];
    *first += 1e-3 * first.abs().max(1.0);
}

fn linear_probe(y: &Array2<f64>, r: &Array2<f64>) -> f64 {
    (y * r).sum()
}

/// One draw of a configuration; `None` when it lies too close to a kink.
fn try_dense(act: Activation, rng: &mut ChaCha8Rng, fault: bool) -> Option<GradCheckReport> {
    let in_dim = rng.gen_range(1..6);
    let out_dim = rng.gen_range(if act == Activation::Softmax { 2 } else { 1 }..6);
    let batch = rng.gen_range(1..5);
    let mut layer = DenseLayer::gaussian(out_dim, in_dim, act, 0.8, rng).expect("valid dims");
    jitter(&mut layer, 0.5, rng);
    let mut x = normal_matrix(batch, in_dim, rng);
    let r = normal_matrix(batch, out_dim, rng);

    let mut tape = Tape::new();
    layer.forward(x.view(), Mode::Train, &mut tape).expect("shapes");
    if layer.relu_margin(&tape.records[0]) < KINK_MARGIN {
        return None;
    }
    let (mut g, g_in) = layer.backward(&tape, &r).expect("recorded");
    if fault {
        corrupt(&mut g);
    }
    let xv = x.clone();
    let numeric = numeric_gradient(&mut layer, DEFAULT_STEP, |l| {
        linear_probe(&l.forward(xv.view(), Mode::Infer, &mut Tape::new()).unwrap(), &r)
    });
    let mut report = compare(&g, &numeric);
    let numeric_in = numeric_gradient(&mut x, DEFAULT_STEP, |xi| {
        linear_probe(&layer.forward(xi.view(), Mode::Infer, &mut Tape::new()).unwrap(), &r)
    });
    report.merge(&compare(&g_in, &numeric_in));
    Some(report)
}

fn try_dropout_mlp(rng: &mut ChaCha8Rng, fault: bool) -> Option<GradCheckReport> {
    let depth = rng.gen_range(2..4);
    let mut sizes = vec![rng.gen_range(1..5)];
    for _ in 0..depth {
        sizes.push(rng.gen_range(2..6));
    }
    let mut acts = vec![Activation::Relu; depth - 1];
    acts.push(Activation::Sigmoid);
    let mut mlp = Mlp::gaussian(&sizes, &acts, 0.3, 0.8, rng).expect("valid dims");
    jitter(&mut mlp, 0.5, rng);
    let batch = rng.gen_range(1..5);
    let x = normal_matrix(batch, sizes[0], rng);
    let r = normal_matrix(batch, *sizes.last().unwrap(), rng);
    let mask_seed: u64 = rng.gen();
    let mask_rng = || <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mask_seed);

    let mut tape = Tape::new();
    mlp.forward(x.view(), Mode::Train, &mut mask_rng(), &mut tape).expect("shapes");
    if mlp.relu_margin(&tape) < KINK_MARGIN {
        return None;
    }
    let (mut g, _) = mlp.backward(&tape, &r).expect("recorded");
    if fault {
        corrupt(&mut g);
    }
    let numeric = numeric_gradient(&mut mlp, DEFAULT_STEP, |m| {
        let y = m.forward(x.view(), Mode::Train, &mut mask_rng(), &mut Tape::new()).unwrap();
        linear_probe(&y, &r)
    });
    Some(compare(&g, &numeric))
}

fn random_dropout(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        0.0
    } else {
        0.25
    }
}

fn try_vae(rng: &mut ChaCha8Rng, fault: bool) -> Option<GradCheckReport> {
    let d = rng.gen_range(2..7);
    let nz = rng.gen_range(1..4);
    let shape = VaeShape {
        input_dim: d,
        hidden: vec![rng.gen_range(2..8), rng.gen_range(2..8)],
        latent_dim: nz,
        latent_head: if rng.gen_bool(0.5) { LatentHead::Linear } else { LatentHead::ReluMu },
    };
    let mut vae = VaeParams::init(&shape, random_dropout(rng), 0.5, rng).expect("valid shape");
    jitter(&mut vae, 0.3, rng);
    let batch = rng.gen_range(1..5);
    let x = unit_matrix(batch, d, rng);
    let eps = normal_matrix(batch, nz, rng);
    let mask_seed: u64 = rng.gen();
    let mask_rng = || <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mask_seed);
    let scale = vec![1.0 / batch as f64; batch];

    let mut tape = VaeTape::new();
    vae.forward_loss(x.view(), Mode::Train, &mut mask_rng(), Some(&eps), &mut tape)
        .expect("shapes");
    if vae.relu_margin(&tape) < KINK_MARGIN {
        return None;
    }
    let mut g = vae.backward(&tape, &scale, None).expect("recorded");
    if fault {
        corrupt(&mut g);
    }
    let numeric = numeric_gradient(&mut vae, DEFAULT_STEP, |v| {
        let l = v
            .forward_loss(x.view(), Mode::Train, &mut mask_rng(), Some(&eps), &mut VaeTape::new())
            .unwrap();
        l.total().sum() / batch as f64
    });
    Some(compare(&g, &numeric))
}

fn try_joint(rng: &mut ChaCha8Rng, fault: bool) -> Option<GradCheckReport> {
    let d = rng.gen_range(2..6);
    let cfg = TrainConfig {
        latent_dim: rng.gen_range(1..4),
        hidden: vec![rng.gen_range(2..7), rng.gen_range(2..7)],
        clf_hidden: vec![rng.gen_range(2..6), rng.gen_range(2..6)],
        latent_head: if rng.gen_bool(0.5) { LatentHead::Linear } else { LatentHead::ReluMu },
        dropout: random_dropout(rng),
        init_std: 0.5,
        ..TrainConfig::default()
    };
    let mut params = MilParams::init(d, &cfg, rng).expect("valid config");
    jitter(&mut params, 0.3, rng);
    let n = rng.gen_range(1..5);
    let targets: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let batch = JointBatch {
        x_any: unit_matrix(n, d, rng),
        x_neg: unit_matrix(n, d, rng),
        weights: targets.iter().map(|&t| if t { rng.gen_range(0.0..1.0) } else { 1.0 }).collect(),
        targets,
    };
    let c = rng.gen_range(0.5..2.0);
    let eps_pm = normal_matrix(n, cfg.latent_dim, rng);
    let eps_neg = normal_matrix(n, cfg.latent_dim, rng);
    let mask_seed: u64 = rng.gen();
    let mask_rng = || <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mask_seed);

    let mut tape = JointTape::new();
    params
        .joint_forward(&batch, c, Mode::Train, &mut mask_rng(), Some((&eps_pm, &eps_neg)), &mut tape)
        .expect("shapes");
    if params.relu_margin(&tape) < KINK_MARGIN {
        return None;
    }
    let mut g = params.joint_backward(&tape).expect("recorded");
    if fault {
        corrupt(&mut g);
    }
    let numeric = numeric_gradient(&mut params, DEFAULT_STEP, |p| {
        p.joint_forward(
            &batch,
            c,
            Mode::Train,
            &mut mask_rng(),
            Some((&eps_pm, &eps_neg)),
            &mut JointTape::new(),
        )
        .unwrap()
        .total
    });
    Some(compare(&g, &numeric))
}

/// Result of one seeded gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub seed: u64,
    /// Draws rejected for lying near a ReLU kink before this one.
    pub redraws: u64,
    pub report: GradCheckReport,
}

/// Finite-difference check of one random configuration derived from `seed`.
///
/// `fault` perturbs the analytic gradient, as a negative control.
pub fn grad_check(target: GradTarget, seed: u64, fault: bool) -> GradCase {
    for redraws in 0..MAX_DRAWS {
        let mut rng = rng_for(seed, redraws);
        let report = match target {
            GradTarget::Dense(act) => try_dense(act, &mut rng, fault),
            GradTarget::DropoutMlp => try_dropout_mlp(&mut rng, fault),
            GradTarget::Vae => try_vae(&mut rng, fault),
            GradTarget::Joint => try_joint(&mut rng, fault),
        };
        if let Some(report) = report {
            return GradCase { seed, redraws, report };
        }
    }
    panic!("no kink-free configuration for seed {seed} in {MAX_DRAWS} draws");
}

fn log_density(z: &[f64], p: &LatentPosterior) -> f64 {
    let mut s = 0.0;
    for i in 0..z.len() {
        let var = p.logvar[i].exp();
        let d = z[i] - p.mu[i];
        s += -0.5 * ((2.0 * PI).ln() + p.logvar[i] + d * d / var);
    }
    s
}

/// Monte-Carlo estimate of `KL(p || q)` from `samples` draws of `p`; `q`
/// defaults to the standard normal prior.
pub fn monte_carlo_kl(p: &LatentPosterior, q: Option<&LatentPosterior>, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let prior = LatentPosterior {
        mu: vec![0.0; p.dim()],
        logvar: vec![0.0; p.dim()],
    };
    let q = q.unwrap_or(&prior);
    let mut z = vec![0.0; p.dim()];
    let mut sum = 0.0;
    for _ in 0..samples {
        for i in 0..z.len() {
            z[i] = p.mu[i] + (0.5 * p.logvar[i]).exp() * normal(rng);
        }
        sum += log_density(&z, p) - log_density(&z, q);
    }
    sum / samples as f64
}

/// Random posterior whose divergence from `reference` is at least
/// `MIN_MC_KL`.
pub fn random_posterior(dim: usize, reference: Option<&LatentPosterior>, rng: &mut ChaCha8Rng) -> LatentPosterior {
    loop {
        let p = LatentPosterior {
            mu: (0..dim).map(|_| normal(rng)).collect(),
            logvar: (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        };
        let kl = match reference {
            Some(q) => gaussian_kl(&p, q).expect("same dim"),
            None => p.kl_to_prior(),
        };
        if kl >= MIN_MC_KL {
            return p;
        }
    }
}

/// Worst relative error of closed-form KL against Monte Carlo over
/// `posteriors` random cases. Returns (prior case, pairwise case).
pub fn kl_monte_carlo_errors(posteriors: usize, samples: usize, seed: u64) -> (f64, f64) {
    let mut worst_prior: f64 = 0.0;
    let mut worst_pair: f64 = 0.0;
    for i in 0..posteriors as u64 {
        let mut rng = rng_for(seed, i);
        let dim = rng.gen_range(1..5);
        let p = random_posterior(dim, None, &mut rng);
        let closed = kl_to_prior(&p.mu, &p.logvar);
        let mc = monte_carlo_kl(&p, None, samples, &mut rng);
        worst_prior = worst_prior.max((closed - mc).abs() / closed);

        let q = random_posterior(dim, None, &mut rng);
        let p = random_posterior(dim, Some(&q), &mut rng);
        let closed = gaussian_kl(&p, &q).expect("same dim");
        let mc = monte_carlo_kl(&p, Some(&q), samples, &mut rng);
        worst_pair = worst_pair.max((closed - mc).abs() / closed);
    }
    (worst_prior, worst_pair)
}

/// Largest gap between `gaussian_kl` with unit variances and the separation
/// proxy `0.5 * |mu1 - mu2|^2`.
pub fn unit_variance_kl_gap(cases: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..cases as u64 {
        let mut rng = rng_for(seed, i);
        let dim = rng.gen_range(1..9);
        let a: Vec<f64> = (0..dim).map(|_| 3.0 * normal(&mut rng)).collect();
        let b: Vec<f64> = (0..dim).map(|_| 3.0 * normal(&mut rng)).collect();
        let pa = LatentPosterior::new(a.clone(), vec![0.0; dim]).expect("finite");
        let pb = LatentPosterior::new(b.clone(), vec![0.0; dim]).expect("finite");
        let kl = gaussian_kl(&pa, &pb).expect("same dim");
        worst = worst.max((kl - separation_proxy(&a, &b)).abs());
    }
    worst
}

/// Scalar-loop statistics for one latent column.
pub fn scalar_stats(col: &[f64]) -> [f64; 4] {
    let mut lo = col[0];
    let mut hi = col[0];
    let mut sum = 0.0;
    for &v in col {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
        sum += v;
    }
    let mean = sum / col.len() as f64;
    let mut ss = 0.0;
    for &v in col {
        ss += (v - mean) * (v - mean);
    }
    [lo, hi, mean, (ss / col.len() as f64).sqrt()]
}

/// Largest gap between `pool_bag` and [`scalar_stats`] on random bags.
pub fn pooling_oracle_gap(cases: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..cases as u64 {
        let mut rng = rng_for(seed, i);
        let n = rng.gen_range(1..101);
        let nz = rng.gen_range(1..9);
        let x = normal_matrix(n, nz, &mut rng);
        worst = worst.max(pool_gap(x.view()));
    }
    worst
}

fn pool_gap(x: ArrayView2<f64>) -> f64 {
    let nz = x.ncols();
    let pooled = pool_bag(x).expect("non-empty");
    let mut worst: f64 = 0.0;
    for j in 0..nz {
        let col: Vec<f64> = x.column(j).to_vec();
        let s = scalar_stats(&col);
        for (k, v) in s.iter().enumerate() {
            worst = worst.max((pooled[k * nz + j] - v).abs());
        }
    }
    worst
}

/// Number of random label vectors whose metrics disagree with a direct count.
pub fn confusion_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut bad = 0;
    for i in 0..cases as u64 {
        let mut rng = rng_for(seed, i);
        let n = rng.gen_range(1..50);
        let preds: Vec<Label> = (0..n).map(|_| Label::from_bool(rng.gen())).collect();
        let labels: Vec<Label> = (0..n).map(|_| Label::from_bool(rng.gen())).collect();
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        let mut correct = 0usize;
        for k in 0..n {
            let p = preds[k] == Label::Positive;
            let y = labels[k] == Label::Positive;
            if p == y {
                correct += 1;
            }
            if p && y {
                tp += 1;
            } else if p {
                fp += 1;
            } else if y {
                fn_ += 1;
            }
        }
        let m = metrics(&preds, &labels).expect("equal lengths");
        let c = Confusion::count(&preds, &labels).expect("equal lengths");
        let f = if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        if m.accuracy != correct as f64 / n as f64
            || m.f_score != f
            || m.accuracy + m.error_rate != 1.0
            || (c.tp, c.fp, c.fn_) != (tp, fp, fn_)
        {
            bad += 1;
        }
    }
    bad
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfcheckOptions {
    /// Random configurations per gradient target.
    pub grad_configs: usize,
    pub kl_posteriors: usize,
    pub kl_samples: usize,
    pub seed: u64,
    /// Perturb every analytic gradient; all gradient checks must then fail.
    pub inject_fault: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            grad_configs: 100,
            kl_posteriors: 20,
            kl_samples: 1_000_000,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn grad_result(target: GradTarget, opts: &SelfcheckOptions) -> CheckResult {
    let mut worst: Option<GradCase> = None;
    let mut redraws = 0;
    for i in 0..opts.grad_configs as u64 {
        let case = grad_check(target, crate::seed::derive_seed(opts.seed, i), opts.inject_fault);
        redraws += case.redraws;
        if worst
            .as_ref()
            .map_or(true, |w| case.report.max_rel_error > w.report.max_rel_error)
        {
            worst = Some(case);
        }
    }
    let w = worst.expect("at least one configuration");
    let (block, idx, a, n) = w.report.worst.unwrap_or((0, 0, 0.0, 0.0));
    CheckResult {
        name: format!("grad/{}", target.name()),
        passed: w.report.max_rel_error < GRAD_TOLERANCE,
        detail: format!(
            "max rel err {:.3e} (limit {GRAD_TOLERANCE:.0e}) over {} configs, {redraws} kink redraws; \
             worst seed {} block {block} entry {idx}: analytic {a:.6e} vs numeric {n:.6e}",
            w.report.max_rel_error, opts.grad_configs, w.seed
        ),
    }
}

/// Runs every check and reports each by name.
pub fn run_selfcheck(opts: &SelfcheckOptions) -> Vec<CheckResult> {
    let mut out: Vec<CheckResult> = GradTarget::ALL.iter().map(|&t| grad_result(t, opts)).collect();

    let (prior, pair) = kl_monte_carlo_errors(opts.kl_posteriors, opts.kl_samples, opts.seed);
    for (name, err) in [("kl/prior-vs-monte-carlo", prior), ("kl/pair-vs-monte-carlo", pair)] {
        out.push(CheckResult {
            name: name.into(),
            passed: err < KL_TOLERANCE,
            detail: format!(
                "worst rel err {err:.3e} (limit {KL_TOLERANCE}) over {} posteriors, {} samples",
                opts.kl_posteriors, opts.kl_samples
            ),
        });
    }
    let gap = unit_variance_kl_gap(100, opts.seed);
    out.push(CheckResult {
        name: "kl/unit-variance-reduction".into(),
        passed: gap <= 1e-12,
        detail: format!("max |KL - 0.5|mu1-mu2|^2| = {gap:.3e} (limit 1e-12)"),
    });
    let gap = pooling_oracle_gap(100, opts.seed);
    out.push(CheckResult {
        name: "pool/scalar-oracle".into(),
        passed: gap <= 1e-12,
        detail: format!("max gap {gap:.3e} (limit 1e-12) over 100 bags"),
    });
    let bad = confusion_oracle_mismatches(1000, opts.seed);
    out.push(CheckResult {
        name: "metrics/confusion-oracle".into(),
        passed: bad == 0,
        detail: format!("{bad} of 1000 label sets disagree with the direct count"),
    });
    out
}


#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: bool) -> Vec<CheckResult> {
        run_selfcheck(&SelfcheckOptions {
            grad_configs: 5,
            kl_posteriors: 2,
            kl_samples: 200_000,
            seed: 3,
            inject_fault: fault,
        })
    }

    #[test]
    fn clean_build_passes() {
        for r in quick(false) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let results = quick(true);
        for r in results.iter().filter(|r| r.name.starts_with("grad/")) {
            assert!(!r.passed, "{} should fail under fault injection", r.name);
        }
        assert!(results.iter().filter(|r| !r.name.starts_with("grad/")).all(|r| r.passed));
    }
}
