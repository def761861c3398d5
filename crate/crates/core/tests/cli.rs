use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bayes_lth::checkpoint::Checkpoint;

const TOY: &str = "\
# small blob run
epochs = 2
batch_size = 32
samples = 2
eval_samples = 2
n_train = 25
n_test = 25
milestones = 1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bayes-lth"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn toy_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.txt");
    fs::write(&path, TOY).unwrap();
    path
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn imp_summary_has_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = dir.path().join("imp");
    run(&["imp", "--config", s(&cfg), "--levels", "3", "--rate", "0.2", "--out", s(&out)]);
    let rows = csv(&out.join("summary.csv"));
    assert_eq!(rows.len(), 4);
    for (row, (level, frac)) in rows.iter().zip([(0, 1.0), (1, 0.8), (2, 0.64), (3, 0.512)]) {
        assert_eq!(row[0], level.to_string());
        let got: f64 = row[1].parse().unwrap();
        assert!((got - frac).abs() < 1e-3, "level {level}: {got}");
    }
    assert_eq!(csv(&out.join("epochs.csv")).len(), 4 * 2);
    for level in 0..=3 {
        assert!(out.join(format!("L{level}.bltk")).exists());
        assert!(out.join(format!("L{level}.ticket.bltk")).exists());
    }
    let embedded = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(embedded.contains("levels = 3"), "{embedded}");
}

#[test]
fn bad_config_exits_with_two_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    fs::write(&path, "epochs = 2\nlearning_speed = 9\n").unwrap();
    let out = bin().args(["train", "--config", s(&path)]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_speed"));

    let out = bin().args(["train", "--set", "samples=many"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samples"));
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bltk");
    let out = bin().args(["analyze", "--checkpoint", s(&missing), "--out", s(dir.path())]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn layerwise_shuffle_keeps_layer_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let src = dir.path().join("src");
    run(&["imp", "--config", s(&cfg), "--levels", "2", "--out", s(&src)]);
    let ticket = src.join("L2.ticket.bltk");
    let out = dir.path().join("shuffled");
    run(&[
        "shuffle", "--config", s(&cfg), "--mode", "layerwise", "--checkpoint", s(&ticket), "--no-train", "--out", s(&out),
    ]);
    let before = Checkpoint::load(&ticket).unwrap().mask();
    let after = Checkpoint::load(&out.join("L2.ticket.bltk")).unwrap().mask();
    assert_eq!(before.layer_counts(), after.layer_counts());
    assert_ne!(before.layers, after.layers);

    let reinit = dir.path().join("reinit");
    run(&["reinit", "--config", s(&cfg), "--checkpoint", s(&ticket), "--no-train", "--out", s(&reinit)]);
    assert_eq!(Checkpoint::load(&reinit.join("L2.ticket.bltk")).unwrap().mask().layers, before.layers);
}

#[test]
fn analyze_reproduces_summary_and_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&["lrr", "--config", s(&cfg), "--levels", "2", "--seed", "7", "--out", s(out)]);
    }
    let strip = |rows: Vec<Vec<String>>| -> Vec<Vec<String>> { rows.into_iter().map(|r| r[..4].to_vec()).collect() };
    assert_eq!(strip(csv(&a.join("summary.csv"))), strip(csv(&b.join("summary.csv"))));
    assert_eq!(fs::read(a.join("epochs.csv")).unwrap(), fs::read(b.join("epochs.csv")).unwrap());
    assert_eq!(fs::read(a.join("L2.bltk")).unwrap(), fs::read(b.join("L2.bltk")).unwrap());

    let report = dir.path().join("report");
    let mut args = vec!["analyze".to_owned()];
    for l in 0..=2 {
        args.extend(["--checkpoint".into(), s(&a.join(format!("L{l}.bltk"))).to_owned()]);
    }
    args.extend(["--config".into(), s(&a.join("config.txt")).to_owned(), "--out".into(), s(&report).to_owned()]);
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = csv(&a.join("summary.csv"));
    let analysis = csv(&report.join("analysis.csv"));
    assert_eq!(summary.len(), analysis.len());
    for (x, y) in summary.iter().zip(&analysis) {
        assert_eq!(x[0], y[0]);
        for k in 1..4 {
            let (p, q): (f64, f64) = (x[k].parse().unwrap(), y[k].parse().unwrap());
            assert!((p - q).abs() <= 1e-6, "column {k}: {p} vs {q}");
        }
    }
}

#[test]
fn twenty_levels_leave_about_one_percent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, "epochs = 1\nsamples = 1\neval_samples = 1\nn_train = 10\nn_test = 10\nmilestones = 1\n").unwrap();
    let out = dir.path().join("run");
    run(&["imp", "--config", s(&cfg), "--levels", "20", "--out", s(&out)]);
    let report = dir.path().join("report");
    run(&["analyze", "--checkpoint", s(&out.join("L20.bltk")), "--out", s(&report)]);
    let global = csv(&report.join("sparsity.csv"))
        .into_iter()
        .find(|r| r[2] == "global")
        .unwrap();
    let sparsity: f64 = global[5].parse().unwrap();
    assert!((sparsity - 0.9885).abs() < 1e-3, "{sparsity}");
}

#[test]
fn bench_and_transplant_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let bench = dir.path().join("bench");
    let out = run(&["bench", "--config", s(&cfg), "--out", s(&bench)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ratio"));
    assert_eq!(csv(&bench.join("bench.csv")).len(), 5);

    let tr = dir.path().join("transplant");
    run(&["transplant", "--config", s(&cfg), "--levels", "2", "--out", s(&tr)]);
    assert_eq!(csv(&tr.join("source/summary.csv")).len(), 3);
    let rows = csv(&tr.join("summary.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "2");
}
