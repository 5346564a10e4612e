use std::path::Path;
use std::process::{Command, Output};

fn microsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microsim")).args(args).output().expect("binary runs")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let out = microsim(&["run", "no_such_experiment"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_scenario_file_is_a_usage_error() {
    let out = microsim(&["run", "single_run", "--scenario", "/nonexistent/x.scn"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(microsim(&["run", "single_run", "--bogus"]).status.code(), Some(2));
}

#[test]
fn mismatched_scenario_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let scn = dir.path().join("s.scn");
    std::fs::write(&scn, "experiment = single_run\ntopology = two_tier\n[workload]\narrivals = poisson 10\n").unwrap();
    let out = microsim(&["run", "cascading", "--scenario", scn.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn list_names_every_experiment() {
    let out = microsim(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().any(|l| l == "slow_server_sweep"));
}

#[test]
fn single_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = microsim(&["run", "single_run", "--duration-s", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let listed = String::from_utf8(out.stdout).unwrap();
    assert!(listed.lines().all(|l| Path::new(l).exists()));
    assert!(dir.path().join("summary.json").exists());
    assert!(dir.path().join("latency.csv").exists());
}

#[test]
fn skew_sweep_reports_one_row_per_skew() {
    let dir = tempfile::tempdir().unwrap();
    let out = microsim(&[
        "run",
        "skew_sweep",
        "--skews",
        "0,20,40,60,80,90,95,99",
        "--duration-s",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("goodput_curve.csv"));
    assert_eq!(rows.len(), 8);
    let xs: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(xs, [0.0, 20.0, 40.0, 60.0, 80.0, 90.0, 95.0, 99.0]);
}

#[test]
fn freq_sweep_writes_a_heatmap_per_topology() {
    let dir = tempfile::tempdir().unwrap();
    let out = microsim(&[
        "run",
        "freq_sweep",
        "--freqs",
        "1.0,0.8,0.6,0.4",
        "--loads",
        "10",
        "--duration-s",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["social_network", "social_monolith"] {
        let rows = csv_rows(&dir.path().join(format!("heatmap_{name}.csv")));
        assert_eq!(rows.len(), 4, "{name}");
        assert!(rows.iter().all(|r| r.len() == 11), "{name}");
    }
}
