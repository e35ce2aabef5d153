use std::path::Path;
use std::process::{Command, Output};

fn mpcbco(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpcbco")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().expect("spawn mpcbco")
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).expect("manifest written");
    serde_json::from_str(&text).expect("manifest is JSON")
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mpcbco(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(mpcbco(&["train", "sideways", "--demos", "x", "--out", "y"], dir.path()).status.code(), Some(1));
    assert_eq!(mpcbco(&["gen-track", "--preset", "d1"], dir.path()).status.code(), Some(1));
    let help = mpcbco(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["gen-track", "gen-demos", "train", "eval", "export-plots", "grad-check", "--solver-log", "--no-dbar-squash"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpcbco(&["train", "d1-static", "--demos", "missing", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn pipeline_writes_artifacts_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(mpcbco(&["gen-track", "--preset", "d2", "--out", "tracks/d2.txt"], p).status.success());
    assert!(p.join("tracks/d2.txt").is_file());
    assert_eq!(manifest(&p.join("tracks"))["command"], "gen-track");

    let out = mpcbco(&["gen-demos", "--preset", "d1", "--laps", "2", "--noise-std", "0", "--d-bar-star", "-0.4", "--out", "demos"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(p.join("demos/lap_00.csv").is_file() && p.join("demos/lap_01.csv").is_file());
    let m = manifest(&p.join("demos"));
    assert_eq!(m["seed"], 0);
    assert!(m["versions"]["mpc-bco"].is_string());

    let out = mpcbco(&["--solver-log", "solver.csv", "train", "d1-static", "--demos", "demos", "--val-laps", "1", "--epochs", "1", "--out", "run"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["final.ckpt", "train_log.csv", "history.csv", "epoch_001.ckpt"] {
        assert!(p.join("run").join(f).is_file(), "missing {f}");
    }
    assert_eq!(manifest(&p.join("run"))["config"]["variant"], "D1Static");
    let log = std::fs::read_to_string(p.join("solver.csv")).unwrap();
    assert!(log.starts_with("rollout,step,"));
    assert!(log.lines().count() > 100);

    let out = mpcbco(&["eval", "--policy", "run/final.ckpt", "--demos", "demos", "--n-subtraj", "2", "--out", "eval"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(p.join("eval/eval.csv")).unwrap().lines().count(), 3);
    assert_eq!(manifest(&p.join("eval"))["summary"]["safety_violations"], 0);

    let out = mpcbco(&["export-plots", "--demos", "demos", "--lap", "1", "--after", "run/final.ckpt", "--train-dir", "run", "--out", "plots"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(p.join("plots/lap_trace.csv")).unwrap();
    for series in ["demo,", "before,", "after,"] {
        assert!(trace.lines().any(|l| l.starts_with(series)), "no {series} rows");
    }
    assert_eq!(std::fs::read_to_string(p.join("plots/loss_curve.csv")).unwrap().lines().count(), 3);
    assert!(p.join("plots/manifest.json").is_file());
}

#[test]
fn d2_variants_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(mpcbco(&["gen-demos", "--preset", "d2", "--laps", "2", "--seed", "4", "--out", "demos"], p).status.success());
    let out = mpcbco(&["--no-dbar-squash", "train", "d2-sl", "--demos", "demos", "--val-laps", "1", "--epochs", "20", "--out", "sl"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = std::fs::read_to_string(p.join("sl/final.ckpt")).unwrap();
    assert!(ckpt.contains("squash=false"));
    let out = mpcbco(&["train", "d2-bco", "--demos", "demos", "--val-laps", "1", "--epochs", "1", "--init", "sl/final.ckpt", "--out", "bco"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mpcbco(&["train", "baseline", "--demos", "demos", "--val-laps", "1", "--epochs", "2", "--out", "base"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // wrong checkpoint kind for the variant
    let out = mpcbco(&["train", "d2-bco", "--demos", "demos", "--val-laps", "1", "--init", "base/final.ckpt", "--out", "bad"], p);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpcbco(&["grad-check", "--out", "gc"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = std::fs::read_to_string(dir.path().join("gc/grad_check.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")));
    assert_eq!(manifest(&dir.path().join("gc"))["summary"]["passed"], 9);
}
