use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use milvae::data::load_bags;
use milvae::eval::mean_std;
use milvae::train::MilModel;

fn milvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milvae")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name);
    let mut args = vec!["synth", "--out", p(&path)];
    args.extend_from_slice(extra);
    let out = milvae(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path.to_str().unwrap().to_string()
}

const TINY: &[&str] = &["--nz", "2", "--epochs", "2", "--hidden", "8", "--batch-size", "8"];

#[test]
fn synth_default_round_trip_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_synth(dir.path(), "a.csv", &["--truth", p(&dir.path().join("t.csv"))]);
    let b = small_synth(dir.path(), "b.csv", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = load_bags(&a).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(ds.n_instances(), 1000);
    assert_eq!(ds.dim(), 20);
    assert_eq!(ds.n_positive_bags(), 50);
    let with_truth = milvae::data::load_truth(&ds, dir.path().join("t.csv")).unwrap();
    assert!(with_truth.has_truth());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&milvae(&["cv", "--no-such-flag"])), 1);
    assert_eq!(code(&milvae(&[])), 1);
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.csv", &["--n-bags", "6", "--dim", "3"]);
    assert_eq!(code(&milvae(&["cv", "--data", &data, "--classifier", "svm"])), 1);
    assert_eq!(code(&milvae(&["cv", "--data", &data, "--nz", "0"])), 1);
    assert_eq!(code(&milvae(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&milvae(&["cv", "--data", p(&missing)])), 2);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "bag_id,label,f0,f1\nb0,1,0.5,x\n").unwrap();
    let out = milvae(&["train", "--data", p(&bad), "--out", p(&dir.path().join("m.bin"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:2:"));
}

#[test]
fn cv_two_folds_on_four_bags_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.csv", &["--n-bags", "4", "--instances-per-bag", "3", "--dim", "3"]);
    let mut reports = Vec::new();
    for run in ["r1", "r2"] {
        let out_dir = dir.path().join(run);
        let mut args = vec!["cv", "--data", &data, "--k-folds", "2", "--knn-k", "1", "--out", p(&out_dir)];
        args.extend_from_slice(TINY);
        let out = milvae(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        reports.push((
            fs::read_to_string(out_dir.join("cv_folds.csv")).unwrap(),
            fs::read_to_string(out_dir.join("cv_summary.txt")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
    let (folds, summary) = &reports[0];
    let rows: Vec<&str> = folds.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    // aggregates recompute exactly from the per-fold rows
    let acc: Vec<f64> = rows.iter().map(|r| r.split(',').nth(3).unwrap().parse().unwrap()).collect();
    let (mean, std) = mean_std(&acc);
    assert!(summary.contains(&format!("accuracy_mean = {mean}\n")));
    assert!(summary.contains(&format!("accuracy_std = {std}\n")));
    assert!(summary.contains("k_folds = 2\n"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.csv", &["--n-bags", "6", "--instances-per-bag", "2", "--dim", "3"]);
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!("# tiny run\ndata = {data}\nnz = 3\nepochs = 1\nhidden = 8\nk-folds = 3\nknn_k = 1\n"),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = milvae(&["cv", "--config", p(&cfg), "--nz", "2", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(out_dir.join("cv_summary.txt")).unwrap();
    assert!(summary.contains("nz = 2\n"));
    assert!(summary.contains("epochs = 1\n"));
    assert!(summary.contains("k_folds = 3\n"));

    fs::write(&cfg, "latent_size = 4\n").unwrap();
    assert_eq!(code(&milvae(&["cv", "--config", p(&cfg), "--data", &data])), 1);
}

#[test]
fn encode_table_shape_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.csv", &["--n-bags", "8", "--instances-per-bag", "5", "--dim", "4"]);
    let model_path = dir.path().join("m.bin");
    let history = dir.path().join("h.csv");
    let mut args = vec!["train", "--data", &data, "--out", p(&model_path), "--history", p(&history)];
    args.extend_from_slice(TINY);
    let out = milvae(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 3);

    let table = dir.path().join("enc.csv");
    let pooled = dir.path().join("pool.csv");
    let out = milvae(&[
        "encode", "--data", &data, "--model", p(&model_path), "--out", p(&table), "--pooled", p(&pooled),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(
        header,
        ["bag_id", "instance", "label", "mu_pm_0", "mu_pm_1", "mu_neg_0", "mu_neg_1", "recon_error"]
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r.len() == 8));

    let model = MilModel::load(&model_path).unwrap();
    let ds = load_bags(&data).unwrap();
    for (bag_idx, inst) in [(0, 0), (0, 4), (1, 2), (2, 1), (3, 3), (4, 0), (5, 4), (6, 2), (7, 1), (7, 3)] {
        let bag = &ds.bags()[bag_idx];
        let row = &rows[bag_idx * 5 + inst];
        assert_eq!(row[0], bag.id);
        let x = bag.instances.slice(ndarray::s![inst..inst + 1, ..]);
        let want = model.neg_recon_error(x).unwrap()[0];
        let got: f64 = row[7].parse().unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
    assert_eq!(fs::read_to_string(&pooled).unwrap().lines().count(), 9);

    let other = small_synth(dir.path(), "o.csv", &["--n-bags", "4", "--dim", "6"]);
    let out = milvae(&["encode", "--data", &other, "--model", p(&model_path), "--out", p(&table)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects 4 features"));
}

#[test]
fn sweep_keeps_list_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.csv", &["--n-bags", "6", "--instances-per-bag", "2", "--dim", "3"]);
    let out_dir = dir.path().join("sweep");
    let out = milvae(&[
        "sweep", "--data", &data, "--nz-list", "4,2", "--epochs", "1", "--hidden", "8", "--k-folds", "2",
        "--knn-k", "1", "--out", p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let nz: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(nz, ["4", "2"]);
    assert!(out_dir.join("nz_4/cv_folds.csv").exists());
    assert!(out_dir.join("nz_2/cv_summary.txt").exists());
    let so = stdout(&out);
    assert!(so.find("nz = 4").unwrap() < so.find("nz = 2").unwrap());
}

#[test]
fn sweep_continues_past_a_failing_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.csv", &["--n-bags", "6", "--instances-per-bag", "2", "--dim", "3"]);
    let out_dir = dir.path().join("sweep");
    let out = milvae(&[
        "sweep", "--data", &data, "--nz-list", "0,2", "--epochs", "1", "--hidden", "8", "--k-folds", "2",
        "--knn-k", "1", "--out", p(&out_dir),
    ]);
    assert_ne!(code(&out), 0);
    let table = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let status: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert!(status[0].starts_with("error"));
    assert_eq!(status[1], "ok");
}

#[test]
fn selfcheck_passes_and_names_an_injected_fault() {
    let start = std::time::Instant::now();
    let out = milvae(&["selfcheck"]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
    assert!(secs < 60.0, "selfcheck took {secs:.1} s");

    let out = milvae(&["selfcheck", "--configs", "3", "--inject-fault"]);
    assert_eq!(code(&out), 3);
    let so = stdout(&out);
    assert!(so.contains("FAIL grad/dense-relu"), "{so}");
    assert!(so.contains("PASS pool/scalar-oracle"), "{so}");
}

#[test]
fn easy_regime_cv_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.csv", &["--witness-rate", "1", "--separation", "8"]);
    let out_dir = dir.path().join("cv");
    let out = milvae(&[
        "cv", "--data", &data, "--nz", "2", "--epochs", "8", "--pairs-per-epoch", "1", "--out", p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(out_dir.join("cv_summary.txt")).unwrap();
    let acc: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("accuracy_mean = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}
