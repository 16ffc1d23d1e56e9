use std::path::Path;

use sbm_limits::config::{ExperimentConfig, MethodKind};
use sbm_limits::harness::{run_sweep, SweepOptions, COMPLETED_LOG};

const SWEEP: &str = r#"{
    "k": 3, "p": [0.2, 0.3, 0.5], "alpha": 0.05, "n": 400, "seed": 11,
    "networks": [{"d": 10, "lambda": [1.5, 1.5]}, {"d": 10, "lambda": [1.5, 1.5]}],
    "sweep": {
        "axes": [{"name": "r", "values": [0.8, 1.6]}, {"name": "layers", "values": [1, 2]}],
        "trials": 3,
        "methods": ["bound", "bp", "spectral"]
    }
}"#;

/// Rows of a sweep CSV with the wall-time column removed.
fn rows_without_time(path: &Path) -> Vec<Vec<String>> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let skip = rd.headers().unwrap().iter().position(|h| h == "wall_time_s").unwrap();
    let mut out = vec![rd.headers().unwrap().iter().filter(|&h| h != "wall_time_s").map(String::from).collect::<Vec<_>>()];
    for rec in rd.records() {
        out.push(rec.unwrap().iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, v)| v.to_string()).collect());
    }
    out
}

fn cfg() -> ExperimentConfig {
    ExperimentConfig::from_json(SWEEP).unwrap()
}

#[test]
fn single_point_smoke() {
    let mut c = ExperimentConfig::from_json(SWEEP).unwrap();
    c.sweep.as_mut().unwrap().axes.truncate(0);
    let dir = tempfile::tempdir().unwrap();
    let report = run_sweep(&c, &SweepOptions::new(dir.path())).unwrap();
    for m in [MethodKind::Bound, MethodKind::Bp, MethodKind::Spectral] {
        let rows = &report.rows[&m];
        assert_eq!(rows.len(), 1);
        assert!(rows[0].error.is_empty(), "{}", rows[0].error);
        assert_eq!(rows[0].config_hash, c.hash());
        assert_eq!(rows[0].seed, 11);
        let csv = rows_without_time(&dir.path().join(format!("{}.csv", m.name())));
        assert_eq!(csv.len(), 2);
    }
    let bound = &report.rows[&MethodKind::Bound][0];
    assert!(bound.trace_bound >= 0.0 && bound.trace_bound <= 2.0);
    let bp = &report.rows[&MethodKind::Bp][0];
    assert_eq!(bp.mse_trials.len(), 3);
    assert!(bp.mse_median.is_finite());
    assert!(bp.wall_time_s > 0.0);
}

#[test]
fn reruns_and_thread_counts_give_identical_tables() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut oa = SweepOptions::new(a.path());
    oa.threads = Some(1);
    let mut ob = SweepOptions::new(b.path());
    ob.threads = Some(3);
    run_sweep(&cfg(), &oa).unwrap();
    run_sweep(&cfg(), &ob).unwrap();
    for m in ["bound", "bp", "spectral"] {
        let file = format!("{m}.csv");
        let ra = rows_without_time(&a.path().join(&file));
        assert_eq!(ra.len(), 5);
        assert_eq!(ra, rows_without_time(&b.path().join(&file)), "{m}");
    }
}

#[test]
fn interrupted_sweep_resumes() {
    let fresh = tempfile::tempdir().unwrap();
    run_sweep(&cfg(), &SweepOptions::new(fresh.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut partial = SweepOptions::new(dir.path());
    partial.max_points = Some(2);
    let first = run_sweep(&cfg(), &partial).unwrap();
    assert_eq!(first.rows[&MethodKind::Bp].len(), 2);
    let log = std::fs::read_to_string(dir.path().join(COMPLETED_LOG)).unwrap();
    assert_eq!(log.lines().count(), 6);

    let second = run_sweep(&cfg(), &SweepOptions::new(dir.path())).unwrap();
    assert_eq!(second.skipped, 2);
    assert_eq!(second.rows[&MethodKind::Bp].iter().map(|r| r.point).collect::<Vec<_>>(), vec![2, 3]);
    for m in ["bound", "bp", "spectral"] {
        let file = format!("{m}.csv");
        assert_eq!(rows_without_time(&dir.path().join(&file)), rows_without_time(&fresh.path().join(&file)), "{m}");
    }

    let again = run_sweep(&cfg(), &SweepOptions::new(dir.path())).unwrap();
    assert_eq!(again.skipped, 4);
    assert!(again.rows.is_empty());
}

#[test]
fn changed_config_starts_over() {
    let dir = tempfile::tempdir().unwrap();
    let mut partial = SweepOptions::new(dir.path());
    partial.max_points = Some(1);
    run_sweep(&cfg(), &partial).unwrap();
    let mut other = cfg();
    other.seed = 12;
    assert_ne!(other.hash(), cfg().hash());
    let report = run_sweep(&other, &SweepOptions::new(dir.path())).unwrap();
    assert_eq!(report.skipped, 0);
    assert_eq!(rows_without_time(&dir.path().join("bp.csv")).len(), 5);
}

#[test]
fn failing_points_are_reported_in_the_error_column() {
    let c = ExperimentConfig::from_json(
        r#"{"k": 2, "n": 200, "networks": [{"d": 5, "lambda": [1]}],
            "sweep": {"axes": [{"name": "r", "values": [1.0, 40.0]}], "trials": 2, "methods": ["bp"]}}"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_sweep(&c, &SweepOptions::new(dir.path())).unwrap();
    let rows = &report.rows[&MethodKind::Bp];
    assert!(rows[0].error.is_empty());
    assert!(rows[0].mse_median.is_finite());
    assert!(!rows[1].error.is_empty());
    assert!(!rows[1].converged);
    assert!(rows[1].mse_median.is_nan());
    let csv = rows_without_time(&dir.path().join("bp.csv"));
    let col = csv[0].iter().position(|h| h == "error").unwrap();
    assert!(csv[2][col].starts_with("trial 0:"), "{}", csv[2][col]);
}
