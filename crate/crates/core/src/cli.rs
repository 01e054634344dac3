//! Command-line front end. `run` returns the process exit code.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::classify::{bag_features, ClassifierConfig};
use crate::data::{load_bags, load_truth, save_bags, save_truth, synth_generate, MilDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{cross_validate, CvReport};
use crate::selfcheck::{run_selfcheck, SelfcheckOptions};
use crate::train::{fit, MilModel, TrainConfig};
use crate::vae::LatentHead;

#[derive(Debug, Parser)]
#[command(name = "milvae", version, about = "Multiple instance learning with paired VAEs")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a bag file and save it.
    Train(TrainCmd),
    /// Stratified k-fold cross-validation of the full pipeline.
    Cv(CvCmd),
    /// Write per-instance latent codes (and optionally pooled bag features).
    Encode(EncodeCmd),
    /// Cross-validate over several latent sizes.
    Sweep(SweepCmd),
    /// Generate a synthetic two-cluster bag file.
    Synth(SynthCmd),
    /// Run gradient, KL and pooling self-checks.
    Selfcheck(SelfcheckCmd),
}

/// Options shared by every command that trains. Unset flags fall back to
/// the `--config` file, then to built-in defaults.
#[derive(Debug, Args, Default)]
struct RunOpts {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bag file (`bag_id,label,f0,...`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Instance ground-truth sidecar (`bag_id,instance,label`).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Latent dimension.
    #[arg(long)]
    nz: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Pairs per epoch as a multiple of the instance count.
    #[arg(long)]
    pairs_per_epoch: Option<String>,
    /// Comma-separated hidden widths of the VAE trunk.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    clf_loss_weight: Option<String>,
    /// `linear` or `relu-mu`.
    #[arg(long)]
    latent_head: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Debug, Args, Default)]
struct ClassifierOpts {
    /// `knn`, `nn` or `adaboost`.
    #[arg(long)]
    classifier: Option<String>,
    #[arg(long)]
    k_folds: Option<String>,
    /// Neighbours for the KNN classifier.
    #[arg(long)]
    knn_k: Option<String>,
    #[arg(long)]
    nn_epochs: Option<String>,
    #[arg(long)]
    boost_rounds: Option<String>,
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    run: RunOpts,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch loss table.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CvCmd {
    #[command(flatten)]
    run: RunOpts,
    #[command(flatten)]
    clf: ClassifierOpts,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Per-instance latent table to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional pooled bag-feature table.
    #[arg(long)]
    pooled: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepCmd {
    #[command(flatten)]
    run: RunOpts,
    #[command(flatten)]
    clf: ClassifierOpts,
    /// Comma-separated latent sizes.
    #[arg(long)]
    nz_list: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthCmd {
    #[arg(long)]
    out: PathBuf,
    /// Also write instance ground truth here.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n_bags: usize,
    #[arg(long, default_value_t = 10)]
    instances_per_bag: usize,
    #[arg(long, default_value_t = 0.3)]
    witness_rate: f64,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SelfcheckCmd {
    /// Random configurations per gradient check.
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, default_value_t = 1_000_000)]
    kl_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Everything a training or evaluation command needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub data: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k_folds: usize,
    pub nz_list: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            data: None,
            truth: None,
            out: None,
            k_folds: 10,
            nz_list: vec![8, 16, 32, 64, 128, 256],
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidHyperparameter(format!("cannot parse {key} = '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` setting. Dashes and underscores in keys are
    /// interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let t = &mut self.train;
        match key.as_str() {
            "nz" | "latent_dim" => t.latent_dim = parse_value(&key, value)?,
            "epochs" => t.epochs = parse_value(&key, value)?,
            "pairs_per_epoch" => t.pairs_per_epoch = parse_value(&key, value)?,
            "hidden" => t.hidden = parse_list(&key, value)?,
            "clf_hidden" => t.clf_hidden = parse_list(&key, value)?,
            "lr" => t.lr = parse_value(&key, value)?,
            "rho" => t.rho = parse_value(&key, value)?,
            "batch_size" => t.batch_size = parse_value(&key, value)?,
            "dropout" => t.dropout = parse_value(&key, value)?,
            "clf_loss_weight" => t.clf_loss_weight = parse_value(&key, value)?,
            "init_std" => t.init_std = parse_value(&key, value)?,
            "latent_head" => t.latent_head = value.parse::<LatentHead>()?,
            "seed" => t.seed = parse_value(&key, value)?,
            "classifier" => self.classifier.kind = value.parse()?,
            "knn_k" => self.classifier.knn_k = parse_value(&key, value)?,
            "nn_epochs" => self.classifier.nn.epochs = parse_value(&key, value)?,
            "boost_rounds" => self.classifier.boost_rounds = parse_value(&key, value)?,
            "k_folds" => self.k_folds = parse_value(&key, value)?,
            "nz_list" => self.nz_list = parse_list(&key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "truth" => self.truth = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(Error::InvalidHyperparameter(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                msg: "expected 'key = value'".into(),
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::InvalidHyperparameter(msg) => Error::InvalidHyperparameter(format!(
                    "{}:{}: {msg}",
                    path.display(),
                    i + 1
                )),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Flattened `key = value` listing of the training and classifier
    /// settings, in a stable order.
    pub fn echo(&self) -> BTreeMap<&'static str, String> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let t = &self.train;
        let c = &self.classifier;
        BTreeMap::from([
            ("nz", t.latent_dim.to_string()),
            ("epochs", t.epochs.to_string()),
            ("pairs_per_epoch", t.pairs_per_epoch.to_string()),
            ("hidden", join(&t.hidden)),
            ("clf_hidden", join(&t.clf_hidden)),
            ("lr", t.lr.to_string()),
            ("rho", t.rho.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("dropout", t.dropout.to_string()),
            ("clf_loss_weight", t.clf_loss_weight.to_string()),
            ("init_std", t.init_std.to_string()),
            ("latent_head", t.latent_head.name().to_string()),
            ("seed", t.seed.to_string()),
            ("classifier", c.kind.name().to_string()),
            ("knn_k", c.knn_k.to_string()),
            ("nn_epochs", c.nn.epochs.to_string()),
            ("boost_rounds", c.boost_rounds.to_string()),
            ("k_folds", self.k_folds.to_string()),
        ])
    }
}

fn resolve(run: &RunOpts, clf: Option<&ClassifierOpts>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &run.config {
        cfg.apply_file(path)?;
    }
    let mut flags: Vec<(&str, Option<&String>)> = vec![
        ("nz", run.nz.as_ref()),
        ("epochs", run.epochs.as_ref()),
        ("pairs_per_epoch", run.pairs_per_epoch.as_ref()),
        ("hidden", run.hidden.as_ref()),
        ("lr", run.lr.as_ref()),
        ("rho", run.rho.as_ref()),
        ("batch_size", run.batch_size.as_ref()),
        ("dropout", run.dropout.as_ref()),
        ("clf_loss_weight", run.clf_loss_weight.as_ref()),
        ("latent_head", run.latent_head.as_ref()),
        ("seed", run.seed.as_ref()),
    ];
    if let Some(c) = clf {
        flags.extend([
            ("classifier", c.classifier.as_ref()),
            ("k_folds", c.k_folds.as_ref()),
            ("knn_k", c.knn_k.as_ref()),
            ("nn_epochs", c.nn_epochs.as_ref()),
            ("boost_rounds", c.boost_rounds.as_ref()),
        ]);
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    if let Some(d) = &run.data {
        cfg.data = Some(d.clone());
    }
    if let Some(t) = &run.truth {
        cfg.truth = Some(t.clone());
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<MilDataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidHyperparameter("no dataset given (use --data or 'data = ...')".into()))?;
    let ds = load_bags(path)?;
    match &cfg.truth {
        Some(t) => load_truth(&ds, t),
        None => Ok(ds),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(contents.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Per-fold table with a header row.
pub fn folds_table(report: &CvReport) -> String {
    let mut s = String::from("fold,n_train,n_test,accuracy,f_score,error_rate,separation_init,separation_trained\n");
    for f in &report.folds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            f.fold,
            f.n_train,
            f.n_test,
            f.metrics.accuracy,
            f.metrics.f_score,
            f.metrics.error_rate,
            opt_f64(f.separation.map(|p| p.0)),
            opt_f64(f.separation.map(|p| p.1)),
        );
    }
    s
}

/// `key = value` summary: configuration echo followed by aggregates.
pub fn summary_text(cfg: &RunConfig, report: &CvReport) -> String {
    let mut s = String::from("# cross-validation summary\n");
    for (k, v) in cfg.echo() {
        let _ = writeln!(s, "{k} = {v}");
    }
    let (am, asd) = report.accuracy();
    let (fm, fsd) = report.f_score();
    let _ = writeln!(s, "accuracy_mean = {am}");
    let _ = writeln!(s, "accuracy_std = {asd}");
    let _ = writeln!(s, "f_score_mean = {fm}");
    let _ = writeln!(s, "f_score_std = {fsd}");
    if let Some(g) = report.min_separation_gain() {
        let _ = writeln!(s, "min_separation_gain = {g}");
    }
    s
}

/// Runs cross-validation for `cfg` and writes `cv_folds.csv` and
/// `cv_summary.txt` into `out` when given.
pub fn cv_to_dir(ds: &MilDataset, cfg: &RunConfig, out: Option<&Path>) -> Result<CvReport> {
    let report = cross_validate(ds, &cfg.train, &cfg.classifier, cfg.k_folds, cfg.train.seed)?;
    if let Some(dir) = out {
        write_file(&dir.join("cv_folds.csv"), &folds_table(&report))?;
        write_file(&dir.join("cv_summary.txt"), &summary_text(cfg, &report))?;
    }
    Ok(report)
}

fn cmd_train(cmd: &TrainCmd) -> Result<()> {
    let cfg = resolve(&cmd.run, None)?;
    let ds = load_dataset(&cfg)?;
    let model = fit(&ds, &cfg.train)?;
    model.save(&cmd.out)?;
    if let Some(path) = &cmd.history {
        let mut s = String::from("epoch,phase,vae_pm,vae_neg,clf,total,calib_m\n");
        for h in &model.history {
            let _ = writeln!(
                s,
                "{},{:?},{},{},{},{},{}",
                h.epoch, h.phase, h.loss.vae_pm, h.loss.vae_neg, h.loss.clf, h.loss.total, h.calib_m
            );
        }
        write_file(path, &s.to_lowercase())?;
    }
    match model.history.last() {
        Some(h) => println!(
            "trained {} epochs on {} bags; final loss {:.6}, calibration m = {:.6}",
            model.history.len(),
            ds.len(),
            h.loss.total,
            model.calib_m
        ),
        None => println!("saved untrained model (epochs = 0)"),
    }
    Ok(())
}

fn print_cv(report: &CvReport) {
    let (am, asd) = report.accuracy();
    let (fm, fsd) = report.f_score();
    println!(
        "{} folds: accuracy {:.4} +/- {:.4}, F-score {:.4} +/- {:.4}",
        report.folds.len(),
        am,
        asd,
        fm,
        fsd
    );
}

fn cmd_cv(cmd: &CvCmd) -> Result<()> {
    let mut cfg = resolve(&cmd.run, Some(&cmd.clf))?;
    if let Some(o) = &cmd.out {
        cfg.out = Some(o.clone());
    }
    let ds = load_dataset(&cfg)?;
    let start = Instant::now();
    let report = cv_to_dir(&ds, &cfg, cfg.out.as_deref())?;
    print_cv(&report);
    println!("wall time {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

/// Writes the per-instance latent table for `ds` under `model`.
pub fn write_encoding(model: &MilModel, ds: &MilDataset, out: &Path) -> Result<()> {
    let nz = model.latent_dim();
    let mut w = create(out)?;
    let mut header = String::from("bag_id,instance,label");
    for j in 0..nz {
        let _ = write!(header, ",mu_pm_{j}");
    }
    for j in 0..nz {
        let _ = write!(header, ",mu_neg_{j}");
    }
    header.push_str(",recon_error\n");
    let io = |e| Error::io(out, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    for bag in ds.bags() {
        let x = bag.instances.view();
        let pm = model.encode_pm(x)?;
        let neg = model.encode_neg(x)?;
        let err = model.neg_recon_error(x)?;
        for i in 0..bag.len() {
            let mut row = format!("{},{},{}", bag.id, i, bag.label);
            for v in pm.row(i).iter().chain(neg.row(i).iter()) {
                let _ = write!(row, ",{v:?}");
            }
            let _ = writeln!(row, ",{:?}", err[i]);
            w.write_all(row.as_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Writes pooled bag features (`bag_id,label,f_0,...`).
pub fn write_pooled(model: &MilModel, ds: &MilDataset, out: &Path) -> Result<()> {
    let feats = bag_features(model, ds)?;
    let mut s = String::from("bag_id,label");
    for j in 0..4 * model.latent_dim() {
        let _ = write!(s, ",f_{j}");
    }
    s.push('\n');
    for (bag, f) in ds.bags().iter().zip(&feats) {
        let _ = write!(s, "{},{}", bag.id, f.label);
        for v in &f.values {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    write_file(out, &s)
}

fn cmd_encode(cmd: &EncodeCmd) -> Result<()> {
    let model = MilModel::load(&cmd.model)?;
    let ds = load_bags(&cmd.data)?;
    if ds.dim() != model.input_dim() {
        return Err(Error::InvalidShape(format!(
            "model expects {} features but {} has {}",
            model.input_dim(),
            cmd.data.display(),
            ds.dim()
        )));
    }
    write_encoding(&model, &ds, &cmd.out)?;
    if let Some(p) = &cmd.pooled {
        write_pooled(&model, &ds, p)?;
    }
    println!("encoded {} instances from {} bags", ds.n_instances(), ds.len());
    Ok(())
}

/// Outcome of one sweep entry.
#[derive(Debug)]
pub struct SweepEntry {
    pub nz: usize,
    pub result: Result<CvReport>,
}

/// Cross-validates every latent size in `cfg.nz_list` in order. A failing
/// size is recorded and the sweep moves on.
pub fn sweep(ds: &MilDataset, cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<SweepEntry>> {
    if cfg.nz_list.is_empty() {
        return Err(Error::InvalidHyperparameter("empty latent-size list".into()));
    }
    let mut entries = Vec::with_capacity(cfg.nz_list.len());
    let mut table = String::from("nz,status,accuracy_mean,accuracy_std,f_score_mean,f_score_std\n");
    for &nz in &cfg.nz_list {
        let mut c = cfg.clone();
        c.train.latent_dim = nz;
        let dir = out.map(|o| o.join(format!("nz_{nz}")));
        let result = cv_to_dir(ds, &c, dir.as_deref());
        match &result {
            Ok(r) => {
                let (am, asd) = r.accuracy();
                let (fm, fsd) = r.f_score();
                let _ = writeln!(table, "{nz},ok,{am},{asd},{fm},{fsd}");
            }
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                let _ = writeln!(table, "{nz},error: {msg},,,,");
            }
        }
        entries.push(SweepEntry { nz, result });
    }
    if let Some(o) = out {
        write_file(&o.join("sweep.csv"), &table)?;
    }
    Ok(entries)
}

fn cmd_sweep(cmd: &SweepCmd) -> Result<()> {
    let mut cfg = resolve(&cmd.run, Some(&cmd.clf))?;
    if let Some(list) = &cmd.nz_list {
        cfg.set("nz_list", list)?;
    }
    if let Some(o) = &cmd.out {
        cfg.out = Some(o.clone());
    }
    let ds = load_dataset(&cfg)?;
    let entries = sweep(&ds, &cfg, cfg.out.as_deref())?;
    let mut first_err = None;
    for e in entries {
        match e.result {
            Ok(r) => {
                print!("nz = {}: ", e.nz);
                print_cv(&r);
            }
            Err(err) => {
                eprintln!("nz = {}: error: {err}", e.nz);
                first_err.get_or_insert(err);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn cmd_synth(cmd: &SynthCmd) -> Result<()> {
    let ds = synth_generate(&SynthConfig {
        n_bags: cmd.n_bags,
        instances_per_bag: cmd.instances_per_bag,
        witness_rate: cmd.witness_rate,
        dim: cmd.dim,
        separation: cmd.separation,
        seed: cmd.seed,
    })?;
    save_bags(&ds, &cmd.out)?;
    if let Some(t) = &cmd.truth {
        save_truth(&ds, t)?;
    }
    println!(
        "wrote {} bags ({} positive), {} instances, d = {}",
        ds.len(),
        ds.n_positive_bags(),
        ds.n_instances(),
        ds.dim()
    );
    Ok(())
}

fn cmd_selfcheck(cmd: &SelfcheckCmd) -> Result<bool> {
    let start = Instant::now();
    let results = run_selfcheck(&SelfcheckOptions {
        grad_configs: cmd.configs.max(1),
        kl_samples: cmd.kl_samples.max(1),
        seed: cmd.seed,
        inject_fault: cmd.inject_fault,
        ..SelfcheckOptions::default()
    });
    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    println!("selfcheck finished in {:.1} s", start.elapsed().as_secs_f64());
    Ok(ok)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Cv(c) => cmd_cv(c),
        Command::Encode(c) => cmd_encode(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Synth(c) => cmd_synth(c),
        Command::Selfcheck(c) => match cmd_selfcheck(c) {
            Ok(true) => Ok(()),
            Ok(false) => return 3,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
