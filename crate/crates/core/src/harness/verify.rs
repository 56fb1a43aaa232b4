//! Run verification: oracle totals from the saved trace against a replay of
//! the agent log, the CSV files and the hub store.
//!
//! The log replay is what ties the oracle to the artifacts: CSVs are checked
//! byte-for-byte against the replayed roll-ups, the hub against the CSVs, and
//! the replayed millisecond totals against the oracle. Errors are allowed only
//! up to the time the agent spent disconnected, as recorded in its own log.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::agent::csv::{iso_basic, parse_csv, render_csv};
use crate::agent::csv_file_name;
use crate::agent::log::{read_log, LogEntry, MarkerKind, MarkerLine};
use crate::hub::HubStore;
use crate::model::{EpochMs, EventKind, OccupancyEvent, RollupRecord};
use crate::oracle::oracle_occupancy;

use super::layout::{read_trace, RunManifest, RunPaths};
use super::replay::{replay_entries, ReplayOptions};
use super::HarnessError;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub windows: usize,
    /// Largest per-bay per-window difference between oracle and log replay.
    pub max_error_ms: u64,
    /// Total time the agent spent without a live gateway session.
    pub disconnected_ms: u64,
    pub skipped_log_lines: usize,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "windows checked:      {}", self.windows)?;
        writeln!(f, "max per-bay error:    {} ms", self.max_error_ms)?;
        writeln!(f, "disconnected time:    {} ms", self.disconnected_ms)?;
        if self.skipped_log_lines > 0 {
            writeln!(f, "skipped log lines:    {}", self.skipped_log_lines)?;
        }
        for failure in &self.failures {
            writeln!(f, "FAIL {failure}")?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn inventory(paths: &RunPaths) -> String {
    let items = [
        ("scenario.toml", paths.scenario()),
        ("run.json", paths.manifest()),
        ("trace.jsonl", paths.trace()),
        ("agent/events.log", paths.event_log()),
        ("csv/", paths.csv_dir()),
        ("hub/", paths.hub_dir()),
        ("ledger.json", paths.ledger()),
    ];
    items
        .iter()
        .map(|(name, p)| format!("{name}: {}", if p.exists() { "present" } else { "MISSING" }))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Time between each disconnect marker and the snapshot that ended it.
pub fn disconnected_ms(entries: &[LogEntry], run_end: EpochMs) -> u64 {
    let mut total = 0u64;
    let mut down_since: Option<EpochMs> = None;
    for entry in entries {
        match entry {
            LogEntry::Marker(MarkerLine { ts, marker: MarkerKind::Disconnect, .. }) => {
                down_since.get_or_insert(*ts);
            }
            LogEntry::Event(e) if e.src == EventKind::Snapshot => {
                if let Some(since) = down_since.take() {
                    total += (e.ts.min(run_end) - since).max(0) as u64;
                }
            }
            _ => {}
        }
    }
    if let Some(since) = down_since {
        total += (run_end - since).max(0) as u64;
    }
    total
}

fn first_difference(a: &[RollupRecord], b: &[RollupRecord]) -> String {
    let bays: BTreeSet<_> = a.iter().chain(b).map(|r| r.bay_id).collect();
    for bay in bays {
        let x = a.iter().find(|r| r.bay_id == bay);
        let y = b.iter().find(|r| r.bay_id == bay);
        if x != y {
            let show = |r: Option<&RollupRecord>| {
                r.map_or("absent".to_owned(), |r| format!("{}s/{}", r.occupation_time_sec, r.occupation_rate))
            };
            return format!("bay {bay}: {} vs {}", show(x), show(y));
        }
    }
    "formatting differs".into()
}

pub fn verify(run_dir: &Path) -> Result<VerifyReport, HarnessError> {
    let paths = RunPaths::new(run_dir);
    let mut report = VerifyReport::default();
    if !paths.manifest().exists() || !paths.trace().exists() || !paths.event_log().exists() {
        report.failures.push(format!("missing artifacts in {} ({})", run_dir.display(), inventory(&paths)));
        return Ok(report);
    }
    let manifest = RunManifest::read(&paths.manifest())?;
    let trace = read_trace(&paths.trace())?;
    let log = read_log(&paths.event_log())?;
    report.skipped_log_lines = log.skipped;
    let hub = if paths.hub_dir().is_dir() { Some(HubStore::open(paths.hub_dir())?) } else { None };
    if hub.is_none() {
        report.failures.push(format!("hub store missing ({})", inventory(&paths)));
    }

    let lot = manifest.lot_id.as_str();
    let truth: Vec<OccupancyEvent> = trace
        .items
        .iter()
        .map(|i| OccupancyEvent::update(manifest.start_ms + i.sim_ts, lot, i.bay_id.0, i.new_status))
        .collect();
    let windows = manifest.windows();
    report.windows = windows.len();
    let Some(first) = windows.first() else {
        return Ok(report);
    };
    let opts = ReplayOptions {
        window_ms: manifest.rollup_period_ms,
        epoch: Some(manifest.window_epoch),
        from: Some(first.start),
        to: Some(manifest.end_ms),
        lot_id: Some(manifest.lot_id.clone()),
    };
    let replayed = replay_entries(&log.entries, &opts);
    if replayed.inconsistent > 0 {
        report.failures.push(format!("{} log entries could not be replayed", replayed.inconsistent));
    }
    report.disconnected_ms = disconnected_ms(&log.entries, manifest.end_ms);

    for window in &windows {
        let label = iso_basic(window.start);
        let Some(rollup) = replayed.rollups.iter().find(|r| r.window == *window) else {
            report.failures.push(format!("window {label}: log replay produced nothing"));
            continue;
        };
        let oracle = oracle_occupancy(&truth, *window).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        let bays: BTreeSet<_> = oracle.keys().chain(rollup.totals_ms.keys()).copied().collect();
        for bay in bays {
            let o = oracle.get(&bay).copied().unwrap_or(0);
            let r = rollup.totals_ms.get(&bay).copied().unwrap_or(0);
            report.max_error_ms = report.max_error_ms.max(o.abs_diff(r));
        }

        let csv_path = paths.csv_dir().join(csv_file_name(lot, window.start));
        let csv_records = match fs::read_to_string(&csv_path) {
            Err(_) => {
                report.failures.push(format!("window {label}: missing {}", csv_path.display()));
                None
            }
            Ok(text) => {
                let parsed = parse_csv(&text);
                if text != render_csv(&rollup.records) {
                    let detail = match &parsed {
                        Ok(records) => first_difference(records, &rollup.records),
                        Err(e) => e.clone(),
                    };
                    report.failures.push(format!("window {label}: CSV differs from log replay, {detail} (csv vs log)"));
                }
                parsed.ok()
            }
        };
        if let (Some(hub), Some(csv)) = (&hub, &csv_records) {
            match hub.query_daily(lot, window.start) {
                None => report.failures.push(format!("window {label}: not stored at hub")),
                Some(stored) if stored != csv.as_slice() => report.failures.push(format!(
                    "window {label}: hub differs from CSV, {} (hub vs csv)",
                    first_difference(stored, csv)
                )),
                Some(_) => {}
            }
        }
    }
    if report.max_error_ms > report.disconnected_ms {
        report.failures.push(format!(
            "max per-bay error {} ms exceeds disconnected time {} ms",
            report.max_error_ms, report.disconnected_ms
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::log::EventLine;
    use crate::model::BayStatus;

    #[test]
    fn disconnection_spans() {
        let snap = |ts| LogEntry::Event(EventLine::from(&OccupancyEvent::snapshot(ts, "A", 1, BayStatus::Free)));
        let entries = vec![snap(0), LogEntry::disconnect(10), snap(25), LogEntry::disconnect(100)];
        assert_eq!(disconnected_ms(&entries, 150), 15 + 50);
    }

    fn run(extra: &str) -> (tempfile::TempDir, RunPaths) {
        let dir = tempfile::tempdir().unwrap();
        let scenario = crate::harness::ScenarioConfig::parse(&format!("lot-id = \"A\"\nbays = 8\nseed = 11\n{extra}"));
        let out = crate::harness::run_sim(scenario.unwrap(), dir.path().join("run")).unwrap();
        (dir, out.paths)
    }

    #[test]
    fn clean_run_is_exact() {
        let (_dir, paths) = run("days = 2");
        let r = verify(&paths.root).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!((r.windows, r.max_error_ms, r.disconnected_ms), (2, 0, 0));
    }

    #[test]
    fn disconnect_error_is_bounded() {
        let (_dir, paths) = run("inject = [\"drop:30000:120\"]\nbackoff-cap-ms = 1000");
        let r = verify(&paths.root).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.disconnected_ms, 120_000);
        assert!(r.max_error_ms <= 120_000);
    }

    #[test]
    fn tampered_csv_names_bay_and_window() {
        let (_dir, paths) = run("");
        let csv = fs::read_dir(paths.csv_dir()).unwrap().next().unwrap().unwrap().path();
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        lines[3] = "3,1,0.0000".into();
        fs::write(&csv, lines.join("\n") + "\n").unwrap();
        let r = verify(&paths.root).unwrap();
        assert!(!r.passed());
        assert!(r.failures.iter().any(|f| f.contains("window 20181118T000000Z") && f.contains("bay 3")), "{r}");
    }

    #[test]
    fn missing_run_lists_inventory() {
        let dir = tempfile::tempdir().unwrap();
        let r = verify(dir.path()).unwrap();
        assert!(!r.passed());
        assert!(r.failures[0].contains("run.json: MISSING"));
    }
}
