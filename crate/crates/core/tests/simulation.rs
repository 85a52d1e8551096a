use std::path::PathBuf;

use merge_stack::scenario::{emit_scenario, load_scenario, load_scenario_file};
use merge_stack::sim::{
    compute_metrics, load_accel_profile, run_scenario, save_accel_profile, synthetic_disturbance, write_outputs,
    write_trajectory_csv, SequencerChoice, TRAJECTORY_COLUMNS,
};

fn repo(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(path)
}

const EXPECTED_HEADER: &str = "step,time,cav_id,road,seq_position,predecessor,z_position,velocity,acceleration,\
delta_d,delta_v,gamma,safety,degraded,x,y,theta,lateral_dev,heading_dev,delta,lateral_degraded";

#[test]
fn trajectory_header_is_stable() {
    assert_eq!(TRAJECTORY_COLUMNS.join(","), EXPECTED_HEADER);
    let config = load_scenario_file(repo("scenarios/scenario1.toml")).unwrap();
    let log = run_scenario(&config, SequencerChoice::Milp, 1.0, 1, None).unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), EXPECTED_HEADER);
    assert_eq!(text.lines().count(), 1 + log.records.len());
}

#[test]
fn bundled_scenarios_round_trip() {
    for name in ["scenario1", "scenario2", "scenario3"] {
        let config = load_scenario_file(repo(&format!("scenarios/{name}.toml"))).unwrap();
        let emitted = emit_scenario(&config);
        let again = load_scenario(&emitted).unwrap();
        assert_eq!(emit_scenario(&again), emitted, "{name}");
    }
}

#[test]
fn runs_are_bit_identical_per_seed() {
    let config = load_scenario_file(repo("scenarios/scenario1.toml")).unwrap();
    let csv = |seed| {
        let log = run_scenario(&config, SequencerChoice::Milp, 10.0, seed, None).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&log, &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(4), csv(4));
    assert_ne!(csv(4), csv(5));
}

#[test]
fn positions_follow_logged_velocity() {
    let config = load_scenario_file(repo("scenarios/scenario1.toml")).unwrap();
    let log = run_scenario(&config, SequencerChoice::Fifo, 15.0, 2, None).unwrap();
    let t = config.simulation.time_step;
    for id in log.cav_ids() {
        let rows: Vec<_> = log.vehicle(id).collect();
        for w in rows.windows(2) {
            let predicted = w[0].z_position + w[0].velocity * t;
            assert!((w[1].z_position - predicted).abs() < 1e-9, "cav {id:?} step {}", w[0].step);
        }
    }
}

#[test]
fn followers_never_overlap_in_scenario1() {
    let config = load_scenario_file(repo("scenarios/scenario1.toml")).unwrap();
    for seq in [SequencerChoice::Milp, SequencerChoice::Fifo] {
        let log = run_scenario(&config, seq, 40.0, 9, None).unwrap();
        let m = compute_metrics(&log, &config.weights.lon);
        assert_eq!(m.collisions, 0);
        assert!(m.min_gap > 5.0, "{}", m.min_gap);
    }
}

#[test]
fn profile_round_trip_and_interpolation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    save_accel_profile(&path, &[(0.0, 0.0), (1.0, 2.0), (2.0, -8.0)]).unwrap();
    let p = load_accel_profile(&path, 0.05, -5.0, 5.0).unwrap();
    assert!((p.accel[10] - 1.0).abs() < 1e-12);
    assert!((p.accel[30] + 3.0).abs() < 1e-12);
    // -8 is clipped to the acceleration floor.
    assert_eq!(*p.accel.last().unwrap(), -5.0);
    assert!(p.clipped > 0);

    let synth = synthetic_disturbance();
    assert_eq!(synth.len(), 101);
    assert!(synth.iter().all(|(_, a)| a.abs() <= 1.5 + 1e-12));
}

#[test]
fn profile_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "time_s,accel_mps2\n0.0,1.0\n0.0,2.0\n").unwrap();
    assert!(load_accel_profile(&path, 0.1, -5.0, 5.0).is_err());
    std::fs::write(&path, "time_s,accel_mps2\n").unwrap();
    assert!(load_accel_profile(&path, 0.1, -5.0, 5.0).is_err());
    assert!(load_accel_profile(dir.path().join("missing.csv"), 0.1, -5.0, 5.0).is_err());
}

#[test]
fn empty_scenario_yields_empty_log() {
    let config = load_scenario("name = \"empty\"\n").unwrap();
    let log = run_scenario(&config, SequencerChoice::Milp, 5.0, 0, None).unwrap();
    assert!(log.records.is_empty());
    assert!(log.sequence_events.is_empty());
}

#[test]
fn loader_reports_bad_fields() {
    let err = load_scenario("[simulation]\nhorizon = 0\n").unwrap_err().to_string();
    assert!(err.contains("horizon"), "{err}");
    let err = load_scenario("[simulation]\ntime_step = \"fast\"\n").unwrap_err().to_string();
    assert!(err.contains("line"), "{err}");
}

#[test]
fn output_directory_is_complete() {
    let config = load_scenario_file(repo("scenarios/scenario3.toml")).unwrap();
    let profile = load_accel_profile(repo("profiles/synthetic_disturbance.csv"), 0.1, -5.0, 5.0).unwrap();
    let log = run_scenario(&config, SequencerChoice::Milp, 3.0, 0, Some(&profile)).unwrap();
    let metrics = compute_metrics(&log, &config.weights.lon);
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&log, &metrics, dir.path()).unwrap();
    for f in ["trajectory.csv", "broadcast.jsonl", "lateral.jsonl", "sequence.jsonl", "metrics.json", "run.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
    let lateral = std::fs::read_to_string(dir.path().join("lateral.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(lateral.lines().next().unwrap()).unwrap();
    for key in ["cav_id", "step", "X", "Y", "theta", "lateral_dev", "heading_dev", "delta"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}
