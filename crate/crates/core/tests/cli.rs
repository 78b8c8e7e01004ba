use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use statlin_plan::cli::{read_csv, write_belief_trajectory, write_controls, RunConfig, SCHEMA_HEADER};
use statlin_plan::descent::{ControlMode, ScenarioConfig};
use statlin_plan::dynamics::{ControlTrajectory, ControlVector};
use statlin_plan::propagate::propagate;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statlin-plan"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Ten seconds of hover-level thrust for the open-loop model, written where
/// `simulate` and `verify-bound` expect a solve to have left it.
fn seed_artifacts(dir: &Path, model_cfg: &ScenarioConfig) {
    let ctrl = ControlTrajectory::constant(10.0, 20, ControlVector::from([0.5, 0.2])).unwrap();
    let model = model_cfg.model(ControlMode::Polar).unwrap();
    let traj = propagate(&model, &model_cfg.initial_belief().unwrap(), &ctrl, 1).unwrap();
    write_controls(&dir.join("control.csv"), ControlMode::Polar, &ctrl, &[0.5; 20]).unwrap();
    write_belief_trajectory(&dir.join("belief_trajectory.csv"), &traj).unwrap();
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn default_config_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["print-default-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}

#[test]
fn malformed_config_exits_with_two_and_line_info() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "scenario = \"problem4\"\n[solver]\nnodes = = 3\n").unwrap();
    let out = bin(dir.path(), &["solve", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn unknown_keys_and_bad_ranges_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    fs::write(&path, "[solver]\nnodez = 150\n").unwrap();
    assert_eq!(bin(dir.path(), &["solve", "--config", path.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&path, "[model]\nchance_level = 1.5\n").unwrap();
    assert_eq!(bin(dir.path(), &["solve", "--config", path.to_str().unwrap()]).status.code(), Some(2));
    let out = bin(dir.path(), &["probe", "--epsilon", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_run_only_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["solve", "--dry-run"]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["decision_dim"], 301);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn simulate_without_controls_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("control.csv"));
}

#[test]
fn simulate_is_byte_identical_for_a_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        seed_artifacts(d.path(), &ScenarioConfig::default());
        let out = bin(d.path(), &["simulate", "--paths", "200", "--seed", "9"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["paths_sample.csv", "ensemble_stats.csv", "relative_errors.csv", "simulation.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(a.path().join("ensemble_stats.csv")).unwrap();
    assert!(text.starts_with(SCHEMA_HEADER));
}

#[test]
fn noiseless_run_has_identical_paths_and_zero_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.rocket.sigma = [0.0, 0.0];
    cfg.model.initial_cov_diag = [0.0; 5];
    let path = write_config(dir.path(), &cfg);
    seed_artifacts(dir.path(), &cfg.model);
    assert!(bin(dir.path(), &["simulate", "--config", &path, "--paths", "20"]).status.success());

    let (header, rows) = read_csv(&dir.path().join("paths_sample.csv")).unwrap();
    assert_eq!(header[0], "path");
    let first: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0] == 0.0).collect();
    for r in &rows {
        let twin = first.iter().find(|f| f[1] == r[1]).unwrap();
        assert_eq!(&r[2..], &twin[2..]);
    }
    let (_, stats) = read_csv(&dir.path().join("ensemble_stats.csv")).unwrap();
    assert!(stats.iter().all(|r| r[6..].iter().all(|p| p.abs() < 1e-9)));

    let out = bin(dir.path(), &["verify-bound", "--config", &path, "--epsilon", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bound_report.json")).unwrap()).unwrap();
    assert_eq!(report["constraint_lhs"], 0.0);
    assert_eq!(report["inside"], true);
}

#[test]
fn zero_epsilon_is_outside_for_a_noisy_run() {
    let dir = tempfile::tempdir().unwrap();
    seed_artifacts(dir.path(), &ScenarioConfig::default());
    assert!(bin(dir.path(), &["simulate", "--paths", "100"]).status.success());
    assert!(bin(dir.path(), &["verify-bound", "--epsilon", "0"]).status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bound_report.json")).unwrap()).unwrap();
    assert!(report["constraint_lhs"].as_f64().unwrap() > 0.0);
    assert_eq!(report["inside"], false);
}

#[test]
fn verify_bound_rejects_mismatched_grids() {
    let dir = tempfile::tempdir().unwrap();
    seed_artifacts(dir.path(), &ScenarioConfig::default());
    assert!(bin(dir.path(), &["simulate", "--paths", "50"]).status.success());
    // Replace the planned trajectory with one on a different grid.
    let cfg = ScenarioConfig::default();
    let ctrl = ControlTrajectory::constant(10.0, 7, ControlVector::from([0.5, 0.2])).unwrap();
    let traj = propagate(&cfg.model(ControlMode::Polar).unwrap(), &cfg.initial_belief().unwrap(), &ctrl, 1).unwrap();
    write_belief_trajectory(&dir.path().join("belief_trajectory.csv"), &traj).unwrap();
    let out = bin(dir.path(), &["verify-bound"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn probe_and_accessibility_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.toml");
    fs::write(&cfg_path, "[accessibility]\npoints = 2\nfeedback_points = 2\ndepth = 3\n").unwrap();
    let cfg = cfg_path.to_str().unwrap();
    assert!(bin(dir.path(), &["probe", "--config", cfg]).status.success());
    let (header, rows) = read_csv(&dir.path().join("probe.csv")).unwrap();
    assert_eq!(header, ["eta", "constraint_value", "terminal_error"]);
    assert_eq!(rows.len(), 4);

    let out = bin(dir.path(), &["check-accessibility", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("accessibility.csv")).unwrap();
    assert!(table.starts_with(SCHEMA_HEADER));
    assert_eq!(table.lines().filter(|l| l.starts_with("open_loop")).count(), 2);
    assert_eq!(table.lines().filter(|l| l.starts_with("feedback")).count(), 2);
}
