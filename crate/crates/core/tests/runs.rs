//! End-to-end runs of small grids: determinism, resume and config checks.

use std::path::Path;

use brrep::experiments_cli::config::ExperimentConfig;
use brrep::experiments_cli::records::read_rows;
use brrep::experiments_cli::runner::{run_experiment, RunOptions};

fn config(dir: &Path, name: &str, body: &str) -> ExperimentConfig {
    let out = dir.join(name);
    let text = format!("{{ {body}, \"output\": {:?} }}", out.to_str().unwrap());
    let path = dir.join(format!("{name}.cfg.json"));
    std::fs::write(&path, text).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

const ANTI: &str = r#""experiment": "anticoncentration", "N_list": [6, 8, 10], "t_max": 6"#;
const PURITY: &str = r#""experiment": "mutual_purity_threshold", "N_list": [6, 8], "lambda_list": [0.05],
    "p_list": [0.25, 0.5], "t_meas_alpha": 1.0"#;

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [("a", ANTI), ("p", PURITY)] {
        let cfg = config(dir.path(), name, body);
        run_experiment(&cfg, &RunOptions { jobs: Some(3), fresh: true }).unwrap();
        let first = std::fs::read(cfg.csv_path()).unwrap();
        run_experiment(&cfg, &RunOptions { jobs: Some(1), fresh: true }).unwrap();
        assert_eq!(first, std::fs::read(cfg.csv_path()).unwrap(), "{name}");
        let rows = read_rows(&cfg.csv_path()).unwrap();
        assert!(rows.iter().all(|r| r.log2_value.is_finite()));
    }
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", ANTI);
    let rec = run_experiment(&cfg, &RunOptions { jobs: Some(2), fresh: true }).unwrap();
    assert!(rec.failures.is_empty());
    let full = std::fs::read_to_string(cfg.csv_path()).unwrap();

    // Simulate a crash during the last job: its progress entry is missing
    // and only part of its rows reached the CSV.
    let progress = std::fs::read_to_string(cfg.progress_path()).unwrap();
    let kept: Vec<&str> = progress.lines().take(2).collect();
    std::fs::write(cfg.progress_path(), kept.join("\n") + "\n").unwrap();
    let n_lines = full.lines().count();
    let partial: Vec<&str> = full.lines().take(n_lines - 3).collect();
    std::fs::write(cfg.csv_path(), partial.join("\n") + "\n").unwrap();

    run_experiment(&cfg, &RunOptions { jobs: Some(2), fresh: false }).unwrap();
    assert_eq!(full, std::fs::read_to_string(cfg.csv_path()).unwrap());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.summary_path()).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], serde_json::Value::String(cfg.hash()));
}

#[test]
fn resume_refuses_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", ANTI);
    run_experiment(&cfg, &RunOptions { jobs: Some(1), fresh: true }).unwrap();
    let mut other = cfg.clone();
    other.t_max = Some(5);
    assert!(run_experiment(&other, &RunOptions { jobs: Some(1), fresh: false }).is_err());
    assert!(run_experiment(&other, &RunOptions { jobs: Some(1), fresh: true }).is_ok());
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let bad = [
        r#""experiment": "cmi", "N_list": [2]"#,
        r#""experiment": "anticoncentration", "N_list": []"#,
        r#""experiment": "xeb_fixed_noise", "N_list": [8], "lambda_list": [0.9]"#,
        r#""experiment": "xeb_scaled_noise", "N_list": [4], "mu_list": [4.0]"#,
        r#""experiment": "mutual_purity_depth", "N_list": [8], "lambda_list": [0.1], "p_list": [0.0]"#,
        r#""experiment": "mutual_purity_depth", "N_list": [8], "lambda_list": [0.1], "p_list": [0.2], "placement": "random""#,
        r#""experiment": "lightcone_purity", "N_list": [8], "lambda_list": [0.1], "p_list": [0.2]"#,
        r#""experiment": "oracle_check", "N_list": [6], "oracle": {"n_trajectories": 1000, "delta_t": 0.1, "time": 1.0}"#,
        r#""experiment": "anticoncentration", "N_list": [8], "truncation": {"chi_max": 0, "discard_tolerance": 0.0}"#,
        r#""experiment": "anticoncentration", "N_list": [8], "bogus": 1"#,
    ];
    for (i, body) in bad.iter().enumerate() {
        let out = dir.path().join("x");
        let path = dir.path().join(format!("{i}.json"));
        std::fs::write(&path, format!("{{ {body}, \"output\": {:?} }}", out.to_str().unwrap())).unwrap();
        assert!(ExperimentConfig::load(&path).is_err(), "accepted: {body}");
    }
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 9);
}
