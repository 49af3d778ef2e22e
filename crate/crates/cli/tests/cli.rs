use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voltcoord::fixture::{self, RandomSpec};
use voltcoord::grid::save_network;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn voltcoord(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voltcoord")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_grid(dir: &Path) -> (String, String) {
    let inst = fixture::random_instance(0, &RandomSpec::default());
    let p = dir.join("small.json");
    save_network(&inst.net, &p).unwrap();
    (p.to_str().unwrap().to_string(), inst.interface)
}

#[test]
fn validate_accepts_fixture() {
    let o = voltcoord(&["validate", fixtures().join("feeder15.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("ok:"));
}

#[test]
fn validate_lists_every_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("two_bus.json")).unwrap();
    let mut grid: serde_json::Value = serde_json::from_str(&text).unwrap();
    grid["buses"][1]["kind"] = "slack".into();
    grid["lines"][0]["to_bus"] = "nowhere".into();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, grid.to_string()).unwrap();
    let o = voltcoord(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("error:")).count() >= 2, "{out}");
}

#[test]
fn missing_file_is_an_error() {
    let o = voltcoord(&["validate", "/nonexistent/grid.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn fixture_matches_checked_in_files() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("f.json");
    let prof = dir.path().join("f.csv");
    let o = voltcoord(&["fixture", "feeder15", "--out", grid.to_str().unwrap(), "--profiles", prof.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(&grid).unwrap(), std::fs::read(fixtures().join("feeder15.json")).unwrap());
    assert_eq!(std::fs::read(&prof).unwrap(), std::fs::read(fixtures().join("feeder15_day.csv")).unwrap());
    let o = voltcoord(&["fixture", "feeder15-high-pv", "--out", grid.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(&grid).unwrap(), std::fs::read(fixtures().join("feeder15_highpv.json")).unwrap());
}

#[test]
fn flex_methods_agree_on_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (grid, ifc) = small_grid(dir.path());
    let range = |method: &str| -> serde_json::Value {
        let o = voltcoord(&["flex", &grid, "--interface", &ifc, "--method", method]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str(&stdout(&o)).unwrap()
    };
    let (o, s) = (range("oracle"), range("sensitivity"));
    let step = o["grid_step_mvar"].as_f64().unwrap();
    assert!(s["q_min_mvar"].as_f64().unwrap() >= o["q_min_mvar"].as_f64().unwrap() - step);
    assert!(s["q_max_mvar"].as_f64().unwrap() <= o["q_max_mvar"].as_f64().unwrap() + step);
}

#[test]
fn allocate_reports_setpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (grid, ifc) = small_grid(dir.path());
    let o = voltcoord(&["flex", &grid, "--interface", &ifc]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let target = 0.5 * (r["q_min_mvar"].as_f64().unwrap() + r["q_max_mvar"].as_f64().unwrap());
    let o = voltcoord(&["allocate", &grid, "--interface", &ifc, "--target", &format!("{target}")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let b: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((b["achieved_mvar"].as_f64().unwrap() - target).abs() < 0.05);
    assert!(b["q_setpoints_mvar"].as_object().is_some());
    let o = voltcoord(&["allocate", &grid, "--interface", "nope", "--target", "-1"]);
    assert_eq!(o.status.code(), Some(1));
}

fn short_scenario(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut sc = serde_json::json!({
        "grid": fixtures().join("feeder15.json"),
        "interface": "T_HVMV",
        "horizon": 3,
        "events": [{ "at": 1, "kind": "tso_q_request", "q_mvar": -0.5 }],
    });
    for (k, v) in extra.as_object().unwrap() {
        sc[k] = v.clone();
    }
    let p = dir.join("sc.json");
    std::fs::write(&p, sc.to_string()).unwrap();
    p
}

#[test]
fn run_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_scenario(dir.path(), serde_json::json!({}));
    let out = dir.path().join("out");
    let o = voltcoord(&["run", sc.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5", "--format", "jsonl"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["timeseries.jsonl", "events.jsonl", "comms.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 5);
    assert_eq!(s["steps"], 3);
}

#[test]
fn run_with_violations_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_scenario(dir.path(), serde_json::json!({ "constraints": { "v_max": 0.99 } }));
    let out = dir.path().join("out");
    let o = voltcoord(&["run", sc.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("timeseries.csv").exists());
}
