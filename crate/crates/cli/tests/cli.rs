use std::path::Path;
use std::process::{Command, Output};

fn intercept(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intercept")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = intercept(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_is_deterministic_under_a_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(&["gen-data", "--flights", "12", "--seed", "4", "--out", s(dir), "--csv"]);
        ok(&["train", "--size", "small", "--epochs", "2", "--seed", "4", "--out", s(dir)]);
        let model = dir.join("lstm-small.icm");
        ok(&["eval-predictor", "--model", s(&model), "--out", s(dir)]);
        ok(&["simulate", "--law", "pn,apn,nmpc,nmpc-tap", "--np", "10", "--model", s(&model), "--seed", "4", "--out", s(dir)]);
        ok(&["montecarlo", "--runs", "2", "--np", "10", "--laws", "pn,nmpc-tap", "--model", s(&model), "--seed", "4", "--out", s(dir)]);
    }
    for f in [
        "dataset.icds",
        "dataset.csv",
        "lstm-small.icm",
        "lstm-small.loss.csv",
        "lstm-small.report.json",
        "sim-pn.csv",
        "sim-apn.csv",
        "sim-nmpc-unknown.csv",
        "sim-nmpc-tap.csv",
        "sim-metrics.json",
        "mc-summary.json",
        "mc-table.csv",
    ] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f} differs");
    }
    let eval: serde_json::Value = serde_json::from_slice(&read(&a.path().join("eval.json"))).unwrap();
    assert_eq!(eval["format"], "intercept-eval/1");
}

#[test]
fn zero_epochs_saves_initial_model_and_header_only_curve() {
    let d = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--flights", "6", "--out", s(d.path())]);
    ok(&["train", "--size", "small", "--arch", "rnn", "--epochs", "0", "--out", s(d.path())]);
    assert!(d.path().join("rnn-small.icm").exists());
    let csv = String::from_utf8(read(&d.path().join("rnn-small.loss.csv"))).unwrap();
    assert_eq!(csv, "epoch,train_mse,val_mse\n");
}

#[test]
fn single_run_table_has_zero_spread() {
    let d = tempfile::tempdir().unwrap();
    ok(&["montecarlo", "--runs", "1", "--laws", "pn,apn", "--out", s(d.path())]);
    let v: serde_json::Value = serde_json::from_slice(&read(&d.path().join("mc-summary.json"))).unwrap();
    assert_eq!(v["format"], "intercept-mc-summary/1");
    for cell in v["summaries"].as_array().unwrap() {
        assert_eq!(cell["md_std"], 0.0);
        assert_eq!(cell["n_runs"], 1);
    }
    let table = String::from_utf8(read(&d.path().join("mc-table.csv"))).unwrap();
    assert!(table.starts_with("law,n_p,md_mean,md_std,it_mean,air,n_runs,n_failed\n"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn unreliable_law_gives_nonzero_exit() {
    let d = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--flights", "6", "--out", s(d.path())]);
    ok(&["train", "--size", "small", "--epochs", "0", "--out", s(d.path())]);
    // the forecast spans 0.8 s, too short for 60 steps, so every run fails
    let model = d.path().join("lstm-small.icm");
    let out = intercept(&["montecarlo", "--runs", "2", "--np", "60", "--laws", "nmpc-tap", "--model", s(&model), "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_errors() {
    let d = tempfile::tempdir().unwrap();
    let out = intercept(&["train", "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
    let out = intercept(&["simulate", "--law", "nmpc-tap", "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn echoed_config_reproduces_outputs() {
    let a = tempfile::tempdir().unwrap();
    ok(&["simulate", "--law", "pn,nmpc", "--np", "12", "--noise", "0.02", "--seed", "8", "--out", s(a.path())]);
    let echo = a.path().join("simulate.config.toml");
    let b = tempfile::tempdir().unwrap();
    ok(&["simulate", "--config", s(&echo), "--out", s(b.path())]);
    for f in ["sim-pn.csv", "sim-nmpc-unknown.csv", "sim-metrics.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn pn_range_decreases_until_closest_approach() {
    let d = tempfile::tempdir().unwrap();
    ok(&["simulate", "--law", "pn", "--noise", "0", "--out", s(d.path())]);
    let text = String::from_utf8(read(&d.path().join("sim-pn.csv"))).unwrap();
    let r: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(5).unwrap().parse().unwrap()).collect();
    let k = r.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert!(r[..=k].windows(2).all(|w| w[1] < w[0]));
}
