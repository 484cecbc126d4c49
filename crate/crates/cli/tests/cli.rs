use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn homlab(config: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg_path = out.with_extension("json");
    fs::write(&cfg_path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_homlab"))
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

const CONSTANT: &str = r#"{
  "subcommand": "effective",
  "seed": 7,
  "field": {"kind": "constant", "dimension": 2, "a_inside": [[2.0, 0.5], [0.5, 3.0]]},
  "effective": {"rve_side": 4.0, "cells": 8, "samples": 3}
}"#;

#[test]
fn constant_effective_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = homlab(CONSTANT, &out, &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["effective"]["tol"], serde_json::json!(1e-10));
    assert_eq!(manifest["config"]["field"]["phase_probability"], serde_json::json!(0.5));
    assert!(manifest["version"].is_string());

    let eff: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("effective.json")).unwrap()).unwrap();
    let m = &eff["matrix"];
    let expect = [[2.0, 0.5], [0.5, 3.0]];
    for i in 0..2 {
        for j in 0..2 {
            let v = m[i][j].as_f64().unwrap();
            assert!((v - expect[i][j]).abs() <= 1e-9 * 3.0, "entry {i}{j} = {v}");
        }
    }
    let checks: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("checks.json")).unwrap()).unwrap();
    assert!(checks["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
    let per_sample = fs::read_to_string(out.join("per_sample.csv")).unwrap();
    assert_eq!(per_sample.lines().count(), 4);
}

#[test]
fn missing_eps_list_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
  "subcommand": "elliptic-convergence",
  "seed": 1,
  "field": {"kind": "layered1d", "dimension": 1, "a_inside": [[1.0]], "a_outside": [[4.0]]},
  "elliptic": {"rhs": 2.0}
}"#;
    let res = homlab(cfg, &dir.path().join("bad"), &[]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("eps_list"), "{err}");
    assert!(err.contains("line"), "{err}");
}

#[test]
fn unknown_key_is_reported_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
  "subcommand": "birkhoff",
  "seed": 1,
  "field": {"kind": "layered1d", "dimension": 1, "a_inside": [[1.0]], "a_outside": [[4.0]]},
  "birkhof": {}
}"#;
    let res = homlab(cfg, &dir.path().join("typo"), &[]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("birkhof") && err.contains("line 5"), "{err}");
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
  "subcommand": "elliptic-convergence",
  "seed": 11,
  "field": {"kind": "layered1d", "dimension": 1, "a_inside": [[1.0]], "a_outside": [[4.0]]},
  "elliptic": {"eps_list": [0.25, 0.125]}
}"#;
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(homlab(cfg, &a, &["--threads", "2"]).status.code(), Some(0));
    assert_eq!(homlab(cfg, &b, &["--threads", "2"]).status.code(), Some(0));
    for name in ["convergence.csv", "elliptic.json", "manifest.json", "checks.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seeded");
    assert_eq!(homlab(CONSTANT, &out, &["--seed", "99"]).status.code(), Some(0));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], serde_json::json!(99));
}
