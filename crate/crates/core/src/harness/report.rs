//! Per-day fleet averages and per-bay daily extremes, as CSV or Markdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::DateTime;

use crate::clock::utc_midnight;
use crate::hub::{bay_extremes, day_hours, fleet_average, HubStore};
use crate::model::{BayId, EpochMs, RollupRecord};

use super::layout::RunManifest;
use super::sim::SimMetrics;
use super::traffic::TrafficLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown report format `{other}` (expected csv|markdown)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayRow {
    pub day_start: EpochMs,
    pub fleet_avg_hours: f64,
    pub bays: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayRow {
    pub bay_id: BayId,
    pub min_hours: f64,
    pub max_hours: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LotReport {
    pub lot_id: String,
    pub days: Vec<DayRow>,
    pub bays: Vec<BayRow>,
}

/// Groups every stored window of `lot_id` by UTC day.
pub fn lot_report(hub: &HubStore, lot_id: &str) -> LotReport {
    let mut by_day: BTreeMap<EpochMs, Vec<&RollupRecord>> = BTreeMap::new();
    for stored in hub.windows(lot_id) {
        by_day.entry(utc_midnight(stored.window_start)).or_default().extend(&stored.records);
    }
    let hours: Vec<(EpochMs, BTreeMap<BayId, f64>)> =
        by_day.into_iter().map(|(day, records)| (day, day_hours(records))).collect();
    let (min, max) = bay_extremes(hours.iter().map(|(_, h)| h));
    LotReport {
        lot_id: lot_id.to_owned(),
        days: hours
            .iter()
            .map(|(day, h)| DayRow { day_start: *day, fleet_avg_hours: fleet_average(h), bays: h.len() })
            .collect(),
        bays: min.iter().map(|(&bay_id, &min_hours)| BayRow { bay_id, min_hours, max_hours: max[&bay_id] }).collect(),
    }
}

fn date(ts: EpochMs) -> String {
    DateTime::from_timestamp_millis(ts).map_or_else(|| ts.to_string(), |d| d.format("%Y-%m-%d").to_string())
}

pub fn daily_csv(report: &LotReport) -> String {
    let mut out = String::from("day,fleetAvgHours,bays\n");
    for d in &report.days {
        let _ = writeln!(out, "{},{:.2},{}", date(d.day_start), d.fleet_avg_hours, d.bays);
    }
    out
}

pub fn bays_csv(report: &LotReport) -> String {
    let mut out = String::from("bayId,minHours,maxHours\n");
    for b in &report.bays {
        let _ = writeln!(out, "{},{:.2},{:.2}", b.bay_id, b.min_hours, b.max_hours);
    }
    out
}

pub fn markdown(report: &LotReport) -> String {
    let mut out = format!("## Lot {}\n\n### Average occupied hours per bay, by day\n\n", report.lot_id);
    out.push_str("| Day | Fleet average (h) | Bays |\n|---|---:|---:|\n");
    for d in &report.days {
        let _ = writeln!(out, "| {} | {:.2} | {} |", date(d.day_start), d.fleet_avg_hours, d.bays);
    }
    out.push_str("\n### Daily occupied hours per bay\n\n| Bay | Min (h) | Max (h) |\n|---:|---:|---:|\n");
    for b in &report.bays {
        let _ = writeln!(out, "| {} | {:.2} | {:.2} |", b.bay_id, b.min_hours, b.max_hours);
    }
    out
}

/// Writes report files for every lot in the hub store at `hub_dir` into
/// `out_dir` and returns their paths.
pub fn export_report(hub_dir: &Path, format: ReportFormat, out_dir: &Path) -> io::Result<Vec<PathBuf>> {
    let hub = HubStore::open(hub_dir).map_err(|e| io::Error::other(e.to_string()))?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for lot in hub.lots() {
        let report = lot_report(&hub, &lot);
        let files = match format {
            ReportFormat::Csv => vec![
                (format!("report_{lot}_daily.csv"), daily_csv(&report)),
                (format!("report_{lot}_bays.csv"), bays_csv(&report)),
            ],
            ReportFormat::Markdown => vec![(format!("report_{lot}.md"), markdown(&report))],
        };
        for (name, body) in files {
            let path = out_dir.join(name);
            fs::write(&path, body)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub(crate) fn summary_markdown(
    manifest: &RunManifest,
    hub: &HubStore,
    ledger: &TrafficLedger,
    metrics: &SimMetrics,
) -> String {
    let mut out = format!("# Run `{}`\n\n", manifest.name);
    let _ = writeln!(out, "- lot: {} ({} bays)", manifest.lot_id, manifest.bay_count);
    let _ = writeln!(out, "- simulated: {} to {}", date(manifest.start_ms), date(manifest.end_ms));
    let _ = writeln!(out, "- windows rolled: {}, stored at hub: {}", metrics.windows_rolled, hub.len());
    let _ = writeln!(
        out,
        "- gateway sessions: {} ({} refused attempts), agent crashes: {}",
        metrics.connects, metrics.refused_connects, metrics.crashes
    );
    let _ = writeln!(
        out,
        "- uploads: {} attempts, {} refused, {} acks lost",
        metrics.upload_attempts, metrics.uploads_refused, metrics.acks_lost
    );
    let _ = writeln!(out, "\n## Traffic\n");
    let _ = writeln!(out, "- updates received: {}", ledger.event_count);
    let _ = writeln!(out, "- raw forwarding: {} bytes", ledger.raw_forward_bytes);
    let _ =
        writeln!(out, "- aggregated uploads: {} bytes in {} envelopes", ledger.aggregated_bytes, ledger.envelope_count);
    match ledger.reduction_ratio {
        Some(r) => {
            let _ = writeln!(out, "- ratio aggregated/raw: {r:.4}");
        }
        None => out.push_str("- ratio aggregated/raw: undefined (no updates)\n"),
    }
    out.push('\n');
    for lot in hub.lots() {
        out.push_str(&markdown(&lot_report(hub, &lot)));
    }
    out
}
