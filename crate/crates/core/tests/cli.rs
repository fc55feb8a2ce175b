use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ssn_core::trace::read_records;

fn ssn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssn")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, methods: &str, loss: &str) -> std::path::PathBuf {
    let text = format!(
        r#"
methods = [{methods}]
seeds = [0, 1]
out_dir = "{}"
[budget]
max_epochs = 5
timing = false
[dataset]
kind = "synth"
n_points = 300
n_features = 20
density = 0.3
seed = 3
noise = 0.1
[problem]
loss = "{loss}"
"#,
        dir.join("out").display()
    );
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn diag_prints_json_and_exits_zero() {
    let out = ssn(&["diag", "metric-bound", "--trials", "500"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["check"], "metric_bound");
    assert_eq!(v["report"]["trials"], 500);
    assert_eq!(v["report"]["pass"], true);
}

#[test]
fn diag_concentration_lists_tail_events() {
    let out = ssn(&["diag", "concentration-vector", "--trials", "2000", "--seed", "5"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["tails"].as_array().unwrap().len(), 4);
}

#[test]
fn unknown_check_is_an_error() {
    let out = ssn(&["diag", "no-such-check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown check"));
}

#[test]
fn run_writes_outputs_and_reuses_reference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#""s2n-d", "s4n-h", "adagrad""#, "logistic");
    let out = ssn(&["run", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("reference psi*"));
    assert!(stdout.contains("s4n-h"));

    let base = dir.path().join("out");
    for f in ["summary.csv", "reference.json", "curves/s4n-h.csv", "curves/adagrad.csv", "runs/s2n-d_seed0.csv"] {
        assert!(base.join(f).exists(), "missing {f}");
    }
    // the deterministic method runs once, stochastic ones per seed
    assert!(!base.join("runs/s2n-d_seed1.csv").exists());
    let recs = read_records(fs::File::open(base.join("runs/s4n-h_seed1.csv")).unwrap()).unwrap();
    assert_eq!(recs[0].k, 0);

    let reference = fs::read(base.join("reference.json")).unwrap();
    let again = ssn(&["run", cfg.to_str().unwrap(), "--seeds", "1"]);
    assert!(again.status.success());
    assert_eq!(fs::read(base.join("reference.json")).unwrap(), reference);
}

#[test]
fn sigmoid_run_reports_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#""s4n-vr""#, "sigmoid");
    let out = ssn(&["run", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("full residual"));
    assert!(!dir.path().join("out/reference.json").exists());
}

#[test]
fn grid_adagrad_reports_every_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#""adagrad""#, "logistic");
    let out = ssn(&["grid-adagrad", cfg.to_str().unwrap(), "--seeds", "1", "--max-epochs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["grid"].as_array().unwrap().len(), 36);
    assert!(v["best_step_scale"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#""newton-ish""#, "logistic");
    let out = ssn(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
