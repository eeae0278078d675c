use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lipnet1d"));
    c.env_remove("LIPNET1D_THREADS");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn lipnet1d")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small data plus a short lip-mode training run shared by several tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(mode: &str) -> Fixture {
        let dir = TempDir::new().unwrap();
        let p = dir.path();
        ok(p, &["synth", "--n", "200", "--seed", "3", "--out", "train.csv"]);
        ok(p, &["synth", "--n", "50", "--seed", "4", "--out", "test.csv"]);
        ok(
            p,
            &[
                "train", "--train-csv", "train.csv", "--test-csv", "test.csv", "--mode", mode, "--rho", "5",
                "--epochs", "2", "--lr", "0.01", "--out", "model.json",
            ],
        );
        Fixture { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn synth_writes_deterministic_csv() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--n", "10", "--seed", "7", "--out", "a.csv"]);
    ok(p, &["synth", "--n", "10", "--seed", "7", "--out", "b.csv"]);
    let a = fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(p.join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 10);
    assert_eq!(a.lines().next().unwrap().split(',').count(), 129);
}

#[test]
fn train_writes_model_and_history_and_certifies() {
    let f = Fixture::new("lip");
    let history = fs::read_to_string(f.file("model.history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,train_acc,test_acc"));
    assert_eq!(lines.count(), 2);

    let out = run(f.path(), &["certify", "--model", "model.json", "--out", "cert.json"]);
    assert_eq!(out.status.code(), Some(0));
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.file("cert.json")).unwrap()).unwrap();
    assert_eq!(cert["pass"], serde_json::Value::Bool(true));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, cert);
}

#[test]
fn certify_rejects_vanilla_model() {
    let f = Fixture::new("vanilla");
    let out = run(f.path(), &["certify", "--model", "model.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn attack_at_zero_budget_reports_clean_accuracy() {
    let f = Fixture::new("lip");
    let eval = ok(f.path(), &["eval", "--model", "model.json", "--data", "test.csv", "--iters", "3"]);
    let acc = eval
        .lines()
        .find_map(|l| l.strip_prefix("accuracy: "))
        .expect("accuracy line")
        .to_string();
    let lb: f64 = eval
        .lines()
        .find_map(|l| l.strip_prefix("lipschitz_lower_bound: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(lb > 0.0 && lb <= 5.0 * (1.0 + 1e-6));

    ok(
        f.path(),
        &["attack", "--model", "model.json", "--data", "test.csv", "--eps-list", "0,0.5", "--steps", "5", "--out", "curve.csv"],
    );
    let curve = fs::read_to_string(f.file("curve.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().collect();
    assert_eq!(rows[0], "epsilon,accuracy");
    assert_eq!(rows[1], format!("0,{acc}"));
    assert_eq!(rows.len(), 3);
}

#[test]
fn export_dumps_materialized_weights() {
    let f = Fixture::new("lip");
    ok(f.path(), &["export", "--model", "model.json", "--out", "theta.json"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.file("theta.json")).unwrap()).unwrap();
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 5);
    assert_eq!(layers[0]["kind"], "conv_avgpool");
    // kernel_size 3 gives K_0, K_1, K_2, each 2 output by 1 input channels.
    let kernels = layers[0]["kernels"].as_array().unwrap();
    assert_eq!(kernels.len(), 3);
    assert_eq!(kernels[0].as_array().unwrap().len(), 2);
    assert_eq!(layers[4]["weight"].as_array().unwrap().len(), 5);
    assert!(v["normalization"]["std"].as_f64().unwrap() > 0.0);
}

#[test]
fn training_is_deterministic() {
    let a = Fixture::new("lip");
    let b = Fixture::new("lip");
    assert_eq!(
        fs::read_to_string(a.file("model.json")).unwrap(),
        fs::read_to_string(b.file("model.json")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--n", "20", "--out", "d.csv"]);
    let config = serde_json::json!({
        "input_length": 128,
        "input_channels": 1,
        "layers": [
            {"kind": "conv_maxpool", "kernel_size": 2, "channels": 2, "pool_size": 4},
            {"kind": "flatten"},
            {"kind": "dense_last", "units": 5}
        ],
        "rho": 3.0,
        "mode": "vanilla"
    });
    fs::write(p.join("config.json"), config.to_string()).unwrap();
    ok(
        p,
        &["train", "--config", "config.json", "--train-csv", "d.csv", "--mode", "lip", "--epochs", "1", "--out", "m.json", "--history", "h.csv"],
    );
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["mode"], "lip");
    assert_eq!(m["config"]["rho"], 3.0);
    assert_eq!(m["config"]["layers"][0]["kind"], "conv_maxpool");
    assert!(p.join("h.csv").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--n", "10", "--out", "d.csv"]);
    for args in [
        vec!["bogus"],
        vec!["attack", "--model", "m.json"],
        vec!["synth", "--n", "3", "--out", "x.csv"],
        vec!["train", "--train-csv", "d.csv", "--rho", "-2", "--out", "m.json"],
        vec!["train", "--train-csv", "d.csv", "--mode", "sideways", "--out", "m.json"],
    ] {
        let out = run(p, &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let out = bin()
        .current_dir(p)
        .env("LIPNET1D_THREADS", "0")
        .args(["synth", "--n", "5", "--out", "y.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let out = run(p, &["certify", "--model", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(p.join("bad.csv"), "0,1,2\n1,3\n").unwrap();
    let out = run(p, &["train", "--train-csv", "bad.csv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn thread_cap_is_accepted() {
    let dir = TempDir::new().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("LIPNET1D_THREADS", "1")
        .args(["synth", "--n", "5", "--out", "d.csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
}
