use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ews_cli::manifest::RunManifest;
use ews_core::checkpoint::Checkpoint;
use ews_core::metrics::{read_log, Metric, MetricsRecord};

const TINY: &[&str] = &[
    "epochs=2",
    "data_train=192",
    "data_val=40",
    "data_test=60",
    "log_every=1",
    "widths=[4, 8]",
];

fn ews(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ews"))
        .args(args)
        .env("EWS_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], root: &Path) -> String {
    let out = ews(args, root);
    assert!(
        out.status.success(),
        "ews {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train(root: &Path, dir: &str, extra: &[&str]) -> PathBuf {
    let run_dir = root.join(dir);
    let mut args = vec!["train".to_string(), "--run-dir".into(), run_dir.display().to_string()];
    for s in TINY.iter().chain(extra) {
        args.push("--set".into());
        args.push(s.to_string());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args, root);
    run_dir
}

/// Metrics with the wallclock entries removed.
fn trajectory(dir: &Path) -> Vec<MetricsRecord> {
    read_log(&dir.join("metrics.jsonl"))
        .unwrap()
        .into_iter()
        .filter(|r| r.metric != Metric::WallclockS)
        .map(|r| MetricsRecord { run_id: String::new(), ..r })
        .collect()
}

/// Checkpoint bytes with the elapsed-time field zeroed.
fn state(path: &Path) -> Vec<u8> {
    let mut c = Checkpoint::load(path).unwrap();
    c.meta["train_seconds"] = 0.0.into();
    c.to_bytes().unwrap()
}

#[test]
fn unknown_key_aborts_before_training() {
    let root = tempfile::tempdir().unwrap();
    let out = ews(
        &["train", "--set", "lamda=1", "--run-dir", root.path().join("r").to_str().unwrap()],
        root.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
    assert!(!root.path().join("r/metrics.jsonl").exists());
}

#[test]
fn zero_lambda_run_logs_no_subnet_loss() {
    let root = tempfile::tempdir().unwrap();
    let vanilla = train(root.path(), "v", &["lambda=0"]);
    let ews_run = train(root.path(), "e", &[]);
    let kl = |d: &Path| {
        read_log(&d.join("metrics.jsonl"))
            .unwrap()
            .iter()
            .filter(|r| r.metric == Metric::LossKl)
            .map(|r| r.value)
            .collect::<Vec<_>>()
    };
    assert!(kl(&vanilla).iter().all(|&v| v == 0.0));
    assert!(kl(&ews_run).iter().any(|&v| v > 0.0));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let whole = train(root.path(), "whole", &["epochs=3"]);
    let part = root.path().join("part");
    let mut args = vec!["train", "--stop-after-epoch", "1", "--run-dir", part.to_str().unwrap()];
    let sets: Vec<String> = TINY.iter().chain(&["epochs=3"]).map(|s| s.to_string()).collect();
    for s in &sets {
        args.extend(["--set", s.as_str()]);
    }
    ok(&args, root.path());
    args.drain(1..3);
    ok(&args, root.path());
    assert_eq!(trajectory(&whole), trajectory(&part));
    assert_eq!(state(&whole.join("last.ckpt")), state(&part.join("last.ckpt")));
}

#[test]
fn seed_change_only_changes_seed_and_hashes() {
    let root = tempfile::tempdir().unwrap();
    let a = RunManifest::load_verified(&train(root.path(), "a", &[])).unwrap();
    let b = RunManifest::load_verified(&train(root.path(), "b", &["seed=1"])).unwrap();
    assert_ne!(a.run_id, b.run_id);
    assert_ne!(a.seed, b.seed);
    assert_eq!(a.dataset_hash, b.dataset_hash);
    assert_eq!(a.code_version, b.code_version);
    let diff: Vec<(&str, &str)> = a.config.lines().zip(b.config.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(diff, vec![("seed = 0", "seed = 1")]);
    assert_ne!(a.checkpoints[0].sha256, b.checkpoints[0].sha256);
}

#[test]
fn manifest_config_reproduces_the_trajectory() {
    let root = tempfile::tempdir().unwrap();
    // 640 / 64 = 10 steps per epoch, 100 steps in total
    let first = train(root.path(), "first", &["seed=4", "epochs=10", "data_train=640"]);
    let manifest = RunManifest::load_verified(&first).unwrap();
    let config = root.path().join("copy.toml");
    fs::write(&config, &manifest.config).unwrap();
    let again = root.path().join("again");
    ok(
        &["train", "--config", config.to_str().unwrap(), "--run-dir", again.to_str().unwrap()],
        root.path(),
    );
    let steps = trajectory(&first).iter().map(|r| r.step).max();
    assert_eq!(steps, Some(100));
    assert_eq!(trajectory(&first), trajectory(&again));
    let m2 = RunManifest::load_verified(&again).unwrap();
    assert_eq!(manifest.run_id, m2.run_id);
    for c in ["last.ckpt", "best.ckpt"] {
        assert_eq!(state(&first.join(c)), state(&again.join(c)));
    }
}

#[test]
fn default_run_dir_is_named_by_run_id() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    for s in TINY {
        args.extend(["--set", s]);
    }
    let printed = ok(&args, root.path());
    let dir = PathBuf::from(printed.trim());
    let manifest = RunManifest::load_verified(&dir).unwrap();
    assert_eq!(dir, root.path().join(&manifest.run_id));
}

#[test]
fn eval_suites_append_well_formed_records() {
    let root = tempfile::tempdir().unwrap();
    let dir = train(root.path(), "v", &["lambda=0"]);
    let d = dir.to_str().unwrap();
    ok(&["eval", "--run-dir", d, "--suite", "clean"], root.path());
    ok(&["eval", "--run-dir", d, "--suite", "corruption", "--limit", "30"], root.path());
    ok(&["eval", "--run-dir", d, "--suite", "adversarial", "--limit", "20"], root.path());
    let records = read_log(&dir.join("metrics.jsonl")).unwrap();
    let test: Vec<&MetricsRecord> = records.iter().filter(|r| r.split == "test").collect();
    let cells: Vec<_> = test
        .iter()
        .filter(|r| r.metric == Metric::CorruptionError && r.severity.is_some())
        .collect();
    assert_eq!(cells.len(), 40);
    assert!(test
        .iter()
        .any(|r| r.metric == Metric::CorruptionError && r.id.as_deref() == Some("mean")));
    let mce: Vec<_> = test.iter().filter(|r| r.metric == Metric::Mce).collect();
    assert_eq!(mce.len(), 1);
    assert!((mce[0].value - 100.0).abs() < 1e-9, "self-normalized mCE {}", mce[0].value);
    assert!(test
        .iter()
        .any(|r| r.metric == Metric::RobustError && r.id.as_deref() == Some("pgd20")));
    assert!(test.iter().all(|r| !r.metric.is_error() || (0.0..=100.0).contains(&r.value)));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval/adversarial.json")).unwrap()).unwrap();
    assert!((report["epsilon"].as_f64().unwrap() - 8.0 / 255.0).abs() < 1e-12);
    // reports are hashed into the manifest
    let m = RunManifest::load_verified(&dir).unwrap();
    assert_eq!(m.reports.len(), 2);
}

#[test]
fn tampered_checkpoint_is_refused() {
    let root = tempfile::tempdir().unwrap();
    let dir = train(root.path(), "t", &["epochs=1"]);
    let ckpt = dir.join("best.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    fs::write(&ckpt, bytes).unwrap();
    let out = ews(&["eval", "--run-dir", dir.to_str().unwrap(), "--suite", "clean"], root.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn plots_are_byte_identical_across_invocations() {
    let root = tempfile::tempdir().unwrap();
    let dir = train(root.path(), "p", &[]);
    let d = dir.to_str().unwrap();
    ok(
        &["analyze", "--run-dir", d, "--limit", "20", "subnet-distribution", "--n", "4"],
        root.path(),
    );
    for figure in ["subnet-distribution", "curves"] {
        let a = root.path().join(format!("{figure}-a.png"));
        let b = root.path().join(format!("{figure}-b.png"));
        ok(&["plot", figure, "--run-dir", d, "--out", a.to_str().unwrap()], root.path());
        ok(&["plot", figure, "--run-dir", d, "--out", b.to_str().unwrap()], root.path());
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}

#[test]
fn analysis_with_no_samples_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let dir = train(root.path(), "n", &["epochs=1"]);
    let out = ews(
        &["analyze", "--run-dir", dir.to_str().unwrap(), "subnet-distribution", "--n", "0"],
        root.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn sweep_writes_one_run_per_value() {
    let root = tempfile::tempdir().unwrap();
    let sweep = root.path().join("sweep");
    let mut args = vec!["sweep", "--param", "lambda", "--values", "0,1", "--run-dir", sweep.to_str().unwrap()];
    for s in TINY {
        args.extend(["--set", s]);
    }
    ok(&args, root.path());
    assert!(sweep.join("lambda=0/manifest.json").exists());
    assert!(sweep.join("lambda=1/manifest.json").exists());
    let tsv = fs::read_to_string(sweep.join("sweep.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
}
