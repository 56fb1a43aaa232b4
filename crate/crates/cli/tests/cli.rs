//! Exit codes and outputs of the `edgepark` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn edgepark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgepark")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_scenario(dir: &Path, text: &str) -> String {
    let scenario = dir.join("scenario.toml");
    fs::write(&scenario, text).unwrap();
    let run = dir.join("run");
    let out = edgepark(&["run-sim", "--scenario", scenario.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("Fleet average"));
    run.to_string_lossy().into_owned()
}

#[test]
fn run_verify_replay_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(dir.path(), "lot-id = \"A\"\nbays = 8\ndays = 2\ninject = [\"drop:3600:60\"]\n");

    let out = edgepark(&["verify", "--run", &run]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).ends_with("PASS\n"));

    let replayed = dir.path().join("replayed");
    let log = format!("{run}/agent/events.log");
    let out = edgepark(&["replay", "--log", &log, "--window-sec", "86400", "--out", replayed.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for entry in fs::read_dir(&replayed).unwrap() {
        let path = entry.unwrap().path();
        let live = Path::new(&run).join("csv").join(path.file_name().unwrap());
        assert_eq!(fs::read(&path).unwrap(), fs::read(live).unwrap());
    }

    let out = edgepark(&["traffic-report", "--run", &run]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("aggregated / raw:"));

    let out = edgepark(&["export-report", "--run", &run, "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).lines().count(), 2);
    assert!(Path::new(&run).join("report/report_A_daily.csv").exists());
}

#[test]
fn tampered_csv_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(dir.path(), "lot-id = \"A\"\nbays = 4\nseed = 3\n");
    let csv = fs::read_dir(Path::new(&run).join("csv")).unwrap().next().unwrap().unwrap().path();
    let text = fs::read_to_string(&csv).unwrap().replacen("\n2,", "\n2,1", 1);
    fs::write(&csv, text).unwrap();
    let out = edgepark(&["verify", "--run", &run]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("bay 2"), "{}", stdout(&out));
}

#[test]
fn missing_run_fails_with_inventory() {
    let dir = tempfile::tempdir().unwrap();
    let out = edgepark(&["verify", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("trace.jsonl: MISSING"));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.toml");
    fs::write(&scenario, "days = 0\n").unwrap();
    let out = edgepark(&["run-sim", "--scenario", scenario.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("days"));

    let out = edgepark(&["agent", "--clock", "sundial"]);
    assert_eq!(out.status.code(), Some(2));

    let out = edgepark(&["agent", "--poll-interval-sec", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn agent_flags_read_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_edgepark"))
        .args(["agent"])
        .env("EDGEPARK_ROLLUP_PERIOD_SEC", "10")
        .env("EDGEPARK_POLL_INTERVAL_SEC", "60")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("roll-up period"));
}
