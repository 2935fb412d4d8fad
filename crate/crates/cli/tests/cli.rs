use std::path::Path;
use std::process::{Command, Output};

fn cli(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robust-alloc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["analytic", "--lambda0", "-1"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["analytic", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["noise", "--eps", "0.1:-1:0"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["analytic", "--threads", "0"]).status.code(), Some(2));
}

#[test]
fn analytic_reference_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["analytic", "--mu", "0.035", "--r", "0.015", "--lambda0", "10", "--penalty", "quadvar", "--x0", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("summary.json"))["value"].as_f64().unwrap();
    assert!((v - 1.6384).abs() < 1e-4, "{v}");
    assert!(stdout(&o).starts_with("value"));
}

#[test]
fn run_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let o = cli(&first, &["analytic", "--lambda0", "3", "--x0", "2", "--seed", "9"]);
    assert!(o.status.success());
    let echo = first.join("run_config.json");
    let cfg = json(&echo);
    assert_eq!(cfg["market"]["lambda0"].as_f64(), Some(3.0));
    assert_eq!(cfg["seed"].as_u64(), Some(9));
    // replaying the echoed file reproduces the run and the echo itself
    let second = dir.path().join("b");
    let o2 = cli(&second, &["analytic", "--config", echo.to_str().unwrap()]);
    assert!(o2.status.success(), "{}", String::from_utf8_lossy(&o2.stderr));
    assert_eq!(json(&second.join("run_config.json")), cfg);
    assert_eq!(json(&second.join("summary.json")), json(&first.join("summary.json")));
    assert_eq!(stdout(&o), stdout(&o2));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"market": {"lamda0": 3}}"#).unwrap();
    assert_eq!(cli(dir.path(), &["analytic", "--config", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn noise_table_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["noise", "--eps", "0:0.05:0.1", "--lambda0", "1,70", "--draws", "200"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("noise_table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("lambda0,epsilon,robust_eu,nonrobust_eu,se"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn xcheck_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["xcheck", "--paths", "4000", "--forward-paths", "4000", "--mc-steps", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    for row in ["analytic", "fdm", "mc fwd", "mc bwd", "mc bracket"] {
        assert!(s.contains(row), "{s}");
    }
}

#[test]
fn single_thread_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["mc", "--paths", "2000", "--forward-paths", "2000", "--mc-steps", "5", "--seed", "4", "--threads", "1"];
    let a = cli(&dir.path().join("a"), &args);
    let b = cli(&dir.path().join("b"), &args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&b));
    let c = cli(&dir.path().join("c"), &["mc", "--paths", "2000", "--forward-paths", "2000", "--mc-steps", "5", "--seed", "5", "--threads", "1"]);
    assert_ne!(stdout(&a), stdout(&c));
}
