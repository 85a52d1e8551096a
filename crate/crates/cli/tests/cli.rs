use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn repo(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(path)
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_merge-stack"))
        .args(args)
        .current_dir(repo(""))
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn gains_reports_verdict() {
    let out = cli(&["gains"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    for key in ["K_b", "K_f", "k_f", "p", "q", "stable", "worst_omega", "worst_magnitude"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["K_b"].as_array().unwrap().len(), 3);
}

#[test]
fn sequence_with_baseline() {
    let out = cli(&["sequence", "--scenario", "scenarios/scenario1.toml", "--baseline", "fifo"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let mut perm: Vec<u64> = v["permutation"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    perm.sort_unstable();
    assert_eq!(perm, vec![1, 2, 3, 4, 5]);
    assert!(v["objective"].as_f64().unwrap() <= v["baseline"]["objective"].as_f64().unwrap());
}

#[test]
fn run_writes_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "run",
        "--scenario",
        "scenarios/scenario3.toml",
        "--duration",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("step,time,cav_id,road,"));
    assert!(dir.path().join("metrics.json").exists());
}

#[test]
fn feasible_set_writes_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "feasible-set",
        "--variant",
        "zero,proposed",
        "--np",
        "4",
        "--samples",
        "20000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cloud = std::fs::read_to_string(dir.path().join("cloud.csv")).unwrap();
    assert_eq!(cloud.lines().next().unwrap(), "variant,delta_d,delta_v,accel");
    assert!(dir.path().join("feasible_set.json").exists());
}

#[test]
fn bad_input_exits_one() {
    let out = cli(&["run", "--scenario", "does/not/exist.toml", "--out", "/tmp/unused-merge-stack"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[simulation]\nhorizon = -3\n").unwrap();
    let out = cli(&["sequence", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn degraded_runs_exit_two() {
    // Seed 3 of the first scenario hits soft-terminal fallbacks.
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "run",
        "--scenario",
        "scenarios/scenario1.toml",
        "--seed",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let degraded = metrics["degraded_events"].as_u64().unwrap();
    assert!(degraded > 0);
    assert_eq!(out.status.code(), Some(2));
}
