//! The command-line tool end to end.

use std::fs;
use std::process::Command;

fn mpgd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mpgd"))
}

const CONFIG: &str = r#"{
    "manifold": {"d": 12, "k": 3, "seed": 1},
    "prior": {"kind": "mixture", "components": 2},
    "schedule": {"T": 8},
    "method": "mpgd-ae",
    "loss": {"kind": "linear-inverse", "m": 3},
    "chains": 3
}"#;

#[test]
fn guide_writes_outputs_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let run = |extra: &[&str]| mpgd().arg("guide").arg("--config").arg(&cfg).arg("--out").arg(&out).args(extra).status().unwrap();
    assert_eq!(run(&[]).code(), Some(0));
    for f in ["trajectories.csv", "diagnostics.csv", "run.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(run(&[]).code(), Some(1));
    assert_eq!(run(&["--force", "--optimizer", "cg", "--inner", "3", "--travel", "1"]).code(), Some(0));
    let header = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(header.starts_with("method,chain,t,shell_residual,off_manifold_norm,cosine,bound_lhs,bound_rhs,kappa"));
}

#[test]
fn sample_ignores_guidance_and_skips_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, CONFIG).unwrap();
    let status = mpgd().args(["sample", "--no-trajectories", "--seed", "5", "--steps", "6", "--eta", "0.5"]).arg("--config").arg(&cfg).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(!dir.path().join("trajectories.csv").exists());
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(record["method"], "ddim");
    assert_eq!(record["master_seed"], 5);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, CONFIG.replace("\"T\": 8", "\"T\": 0")).unwrap();
    let out = mpgd().arg("guide").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule.T"));
    let out = mpgd().args(["guide", "--method", "ddim"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_reports_json() {
    let out = mpgd().args(["verify", "autoencoder"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["margin"].as_f64().unwrap() > 0.0));
    assert_eq!(mpgd().args(["verify", "nonsense"]).status().unwrap().code(), Some(1));
}

#[test]
fn diagnose_prints_step_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out = mpgd().args(["diagnose", "--method", "dps"]).arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let steps = v["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 9);
    assert!(steps[0]["min_bound_slack"].as_f64().unwrap() >= -1e-9);
}
