use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ergolab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergolab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

/// The single run directory under `out`.
fn run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn file_ending(dir: &Path, suffix: &str) -> PathBuf {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with(suffix))
        .unwrap_or_else(|| panic!("no *{suffix} in {}", dir.display()))
}

fn rows(path: &Path) -> (String, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines.map(|l| l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect()).collect();
    (header, rows)
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(file_ending(dir, "_summary.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_decay_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ergolab(tmp.path(), &["simulate", "--config", "zfree", "--set", "simulate.horizon=0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(tmp.path());
    assert!(dir.file_name().unwrap().to_string_lossy().starts_with("zfree_"));
    let (header, data) = rows(&file_ending(&dir, "_trajectory.csv"));
    assert_eq!(header, "t,x_1,x_2,mean_1,mean_2");
    assert_eq!(data.len(), 51);
    let pi2 = std::f64::consts::PI.powi(2);
    for r in &data {
        assert!((r[3] - (-pi2 * r[0]).exp()).abs() < 1e-12);
        assert!((r[4] - (-4.0 * pi2 * r[0]).exp()).abs() < 1e-12);
    }
    let s = summary(&dir);
    assert_eq!(s["command"], "simulate");
    assert_eq!(s["config"]["id"], "zfree");
}

#[test]
fn constant_driver_trace_is_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ergolab(tmp.path(), &["ergodic", "--config", "constant"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(tmp.path());
    let (header, data) = rows(&file_ending(&dir, "_lambda_trace.csv"));
    assert_eq!(header, "alpha,lambda,gap");
    assert_eq!(data.len(), 6);
    assert!(data[0][2].is_nan(), "first rung has no gap");
    for r in &data {
        assert!((r[1] - 1.0).abs() < 1e-8, "{r:?}");
    }
    let (vh, v) = rows(&file_ending(&dir, "_v_bar.csv"));
    assert_eq!(vh, "x_1,x_2,value");
    assert!(v.iter().all(|r| r[2].abs() < 1e-8));
}

#[test]
fn unknown_key_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ergolab(tmp.path(), &["ergodic", "--set", "solver.nodez=3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("solver.nodez"), "{err}");
    assert!(!tmp.path().exists() || fs::read_dir(tmp.path()).unwrap().next().is_none());
}

#[test]
fn malformed_scenario_file_reports_its_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    let src = include_str!("../../../scenarios/constant.toml").replace("nodes = 31", "nodes = \"many\"");
    fs::write(&cfg, src).unwrap();
    let out = tmp.path().join("out");
    let o = ergolab(&out, &["ergodic", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("solver.nodes"));
}

#[test]
fn aborted_run_leaves_no_files() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ergolab(tmp.path(), &["solve-alpha", "--config", "constant", "--alpha=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn csv_payloads_do_not_depend_on_worker_count() {
    let mut payloads = Vec::new();
    for workers in ["1", "3"] {
        let tmp = tempfile::tempdir().unwrap();
        let o = ergolab(tmp.path(), &["recurrence", "--config", "adversarial", "--workers", workers, "--seed", "42"]);
        assert!(o.status.success());
        let dir = run_dir(tmp.path());
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        assert_eq!(files.len(), 2);
        assert!(files[0].0.starts_with("adversarial_s42_hitting_eps"));
        payloads.push(files);
    }
    assert_eq!(payloads[0], payloads[1]);
}

#[test]
fn recurrence_report_is_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ergolab(tmp.path(), &["recurrence", "--config", "heat"]);
    assert_eq!(o.status.code(), Some(0));
    let dir = run_dir(tmp.path());
    let (header, small) = rows(&file_ending(&dir, "_hitting_eps0.25.csv"));
    assert_eq!(header, "T,hit_prob,ci_low,ci_high");
    let (_, large) = rows(&file_ending(&dir, "_hitting_eps0.5.csv"));
    for w in small.windows(2) {
        assert!(w[1][1] >= w[0][1]);
    }
    for (a, b) in small.iter().zip(&large) {
        assert!(b[1] >= a[1]);
        assert!(a[2] <= a[1] && a[1] <= a[3]);
    }
    assert_eq!(summary(&dir)["pass"], true);
}

#[test]
fn coupling_on_ou_writes_tv_and_meeting() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ergolab(tmp.path(), &["coupling", "--config", "scalar_ou"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(tmp.path());
    let (th, tv) = rows(&file_ending(&dir, "_tv.csv"));
    assert_eq!(th, "t,tv_estimate,se");
    assert!(tv.windows(2).all(|w| w[1][1] < w[0][1]));
    let (mh, met) = rows(&file_ending(&dir, "_meeting.csv"));
    assert_eq!(mh, "k,met_fraction");
    assert_eq!(met[0][0], 0.0);
    assert!(met.windows(2).all(|w| w[1][1] >= w[0][1]));
    let eta = summary(&dir)["results"]["tv"]["fit"]["eta_hat"].as_f64().unwrap();
    assert!((eta - 1.0).abs() < 0.2, "{eta}");
}

#[test]
fn full_audit_exit_codes_follow_the_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = ergolab(&tmp.path().join("a"), &["full-audit", "--criteria", "1,10"]);
    assert_eq!(ok.status.code(), Some(0));
    let s = summary(&run_dir(&tmp.path().join("a")));
    assert_eq!(s["pass"], true);
    assert_eq!(s["results"]["criteria"].as_array().unwrap().len(), 2);
    assert_eq!(s["seed"], 20250101);

    let bad = ergolab(&tmp.path().join("b"), &["full-audit", "--criteria", "10", "--set", "recurrence.horizons=[0.01]"]);
    assert_eq!(bad.status.code(), Some(1));
    let s = summary(&run_dir(&tmp.path().join("b")));
    assert_eq!(s["pass"], false);
    assert_eq!(s["config"]["recurrence"]["horizons"][0], 0.01);
}

#[test]
fn seed_flag_changes_the_embedded_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ergolab(tmp.path(), &["simulate", "--config", "heat", "--seed", "9", "--set", "simulate.horizon=0.1"]);
    assert!(o.status.success());
    let dir = run_dir(tmp.path());
    assert_eq!(summary(&dir)["seed"], 9);
    file_ending(&dir, "heat_s9_trajectory.csv");
}
