//! Roll-up CSV files.
//!
//! Format: UTF-8, `\n` line endings, header `bayId,occupationTime,occupationRate`,
//! one row per bay in ascending bay order, whole seconds, four-decimal rates.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::DateTime;

use crate::model::{EpochMs, RollupRecord};

pub const CSV_HEADER: &str = "bayId,occupationTime,occupationRate";

pub fn render_csv(records: &[RollupRecord]) -> String {
    let mut out = String::with_capacity(CSV_HEADER.len() + 1 + records.len() * 20);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.bay_id, r.occupation_time_sec, r.occupation_rate));
    }
    out
}

/// `YYYYMMDDTHHMMSSZ` in UTC.
pub fn iso_basic(ts: EpochMs) -> String {
    DateTime::from_timestamp_millis(ts).map_or_else(|| ts.to_string(), |d| d.format("%Y%m%dT%H%M%SZ").to_string())
}

pub fn csv_file_name(lot_id: &str, window_start: EpochMs) -> String {
    format!("rollup_{lot_id}_{}.csv", iso_basic(window_start))
}

/// Writes the records for one window and returns the file path.
pub fn write_csv(records: &[RollupRecord], window_start: EpochMs, lot_id: &str, csv_dir: &Path) -> io::Result<PathBuf> {
    debug_assert!(records.windows(2).all(|w| w[0].bay_id < w[1].bay_id));
    fs::create_dir_all(csv_dir)?;
    let path = csv_dir.join(csv_file_name(lot_id, window_start));
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, render_csv(records))?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Parses a file produced by [`render_csv`], checking header and ordering.
pub fn parse_csv(text: &str) -> Result<Vec<RollupRecord>, String> {
    let mut lines = text.split_terminator('\n');
    match lines.next() {
        Some(CSV_HEADER) => {}
        other => return Err(format!("bad header {other:?}")),
    }
    let mut out: Vec<RollupRecord> = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let [bay, secs, rate] = fields.as_slice() else {
            return Err(format!("row {}: expected 3 fields", n + 1));
        };
        let parse_err = |what: &str| format!("row {}: bad {what}", n + 1);
        let record = RollupRecord {
            bay_id: crate::model::BayId(bay.parse().map_err(|_| parse_err("bayId"))?),
            occupation_time_sec: secs.parse().map_err(|_| parse_err("occupationTime"))?,
            occupation_rate: serde_json::from_str(rate).map_err(|_| parse_err("occupationRate"))?,
        };
        if out.last().is_some_and(|prev| prev.bay_id >= record.bay_id) {
            return Err(format!("row {}: bay ids not ascending", n + 1));
        }
        out.push(record);
    }
    Ok(out)
}
