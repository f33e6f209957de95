use std::fs;

use ergolab::report::{ReportDir, Summary};
use ergolab::scenario::Scenario;
use serde_json::{json, Value};

#[test]
fn files_carry_scenario_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let s = Scenario::builtin("constant", &["seed=17".into()]).unwrap();
    let mut dir = ReportDir::create(&tmp.path().join("run"), &s).unwrap();
    let path = dir.json("summary", &Summary::new("ergodic", &s, Some(true), json!({ "x": 1 }))).unwrap();
    assert_eq!(path.file_name().unwrap(), "constant_s17_summary.json");
    let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["command"], "ergodic");
    assert_eq!(v["scenario_id"], "constant");
    assert_eq!(v["seed"], 17);
    assert_eq!(v["pass"], true);
    assert_eq!(v["config"]["seed"], 17);
    assert_eq!(v["results"]["x"], 1);
}

#[test]
fn discard_removes_written_files_and_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let s = Scenario::builtin("heat", &[]).unwrap();
    let mut dir = ReportDir::create(&root, &s).unwrap();
    dir.write("tv", "csv", |b| {
        b.extend_from_slice(b"t,tv_estimate,se\n");
        Ok(())
    })
    .unwrap();
    assert_eq!(dir.files().len(), 1);
    dir.discard();
    assert!(!root.exists());
}
