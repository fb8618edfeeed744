//! The `grsio` binary: exit codes, outputs and flag overrides.

use std::path::Path;
use std::process::{Command, Output};

fn grsio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grsio")).args(args).output().unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn passing_run_exits_zero_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "geometry": { "pairs": 200 } }"#);
    let out = dir.path().join("out");
    let o = grsio(&["geometry-selftest", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["config"]["seed"], 3);
    assert!(out.join("derivative_orders.csv").exists());
}

#[test]
fn injected_fault_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "geometry": { "pairs": 50, "fault": "perturbed_orthogonality" } }"#);
    let out = dir.path().join("out");
    let o = grsio(&["geometry-selftest", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL "));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let unknown = write_config(dir.path(), r#"{ "no_such_field": 1 }"#);
    assert_eq!(grsio(&["frame", "--config", &unknown, "--out", out]).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    assert_eq!(grsio(&["frame", "--config", missing.to_str().unwrap(), "--out", out]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "{}");
    assert_eq!(grsio(&["frame", "--config", &cfg, "--n", "9", "--out", out]).status.code(), Some(2));
    assert_eq!(grsio(&["no-such-command", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(grsio(&["frame"]).status.code(), Some(2));
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "seed": 1, "torus": { "period": 4, "points": 32 }, "logn": { "trials": 1, "power_iterations": 1 } }"#,
    );
    let out = dir.path().join("out");
    let o = grsio(&["logn", "--config", &cfg, "--seed", "5", "--alpha", "0.5", "--N-list", "1,2,4", "--out", out.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 5);
    assert_eq!(report["config"]["alpha"], 0.5);
    assert_eq!(report["config"]["N_list"], serde_json::json!([1, 2, 4]));
    let rows = std::fs::read_to_string(out.join("growth.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}
