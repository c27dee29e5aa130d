use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slam_mhe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slam-mhe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, method: &str) -> String {
    let cfg = format!(
        r#"{{"scenario": {{"preset": "corridor", "steps": 40, "num_landmarks": 8, "corridor_length": 8.0}}, "method": "{method}"}}"#
    );
    let path = dir.join(format!("{method}.json"));
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "decoupled");
    let mut files = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "4")] {
        let out = dir.path().join(name);
        let o = slam_mhe(&[
            "run", "--config", &cfg, "--seed", "5", "--workers", workers, "--no-timing",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(summary["steps"], 40);
        assert_eq!(summary["seed"], 5);
        let read = |f: &str| fs::read(out.join(f)).unwrap();
        files.push((read("metrics.csv"), read("tracks.csv"), read("trajectory.csv")));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn compare_reports_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "decoupled");
    let out = dir.path().join("cmp");
    let o = slam_mhe(&[
        "compare", "--config", &cfg, "--method", "decoupled,decoupled", "--no-timing",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("comparison.json")).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[1]["ego_err_ratio"], 1.0);
    assert!(out.join("decoupled").join("metrics.csv").exists());
}

#[test]
fn config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    // rls requires the range sensor; the corridor preset is bearing-only
    let rls = write_config(dir.path(), "rls");
    let o = slam_mhe(&["run", "--config", &rls]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("range sensor"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert!(!slam_mhe(&["run", "--config", bad.to_str().unwrap()]).status.success());

    let missing = dir.path().join("missing.json");
    assert!(!slam_mhe(&["run", "--config", missing.to_str().unwrap()]).status.success());
    assert!(!slam_mhe(&["run", "--scenario", missing.to_str().unwrap()]).status.success());
    assert!(!slam_mhe(&["run", "--method", "nope"]).status.success());
    let cfg = write_config(dir.path(), "decoupled");
    assert!(!slam_mhe(&["run", "--config", &cfg, "--workers", "0"]).status.success());
}
