//! Offline replay: rebuilds roll-ups from an agent event log alone.
//!
//! Flush markers are ignored; the window grid comes from the options, so the
//! same log can be re-rolled at a different period. Disconnect markers are
//! honoured because the live agent stopped accruing at that point.

use std::io;
use std::path::{Path, PathBuf};

use crate::agent::log::{read_log, LogEntry, MarkerKind, MarkerLine};
use crate::agent::write_csv;
use crate::clock::{next_boundary_after, utc_midnight};
use crate::model::{EpochMs, Rollup, RollupWindow, StateTable};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOptions {
    pub window_ms: i64,
    /// Origin of the window grid; defaults to UTC midnight of the first entry
    /// (or of `from`).
    pub epoch: Option<EpochMs>,
    /// Only windows starting at or after this are emitted.
    pub from: Option<EpochMs>,
    /// Last window end; defaults to the last flush marker or the boundary at
    /// or after the last entry, whichever is later.
    pub to: Option<EpochMs>,
    /// Lot id for the output files when the log carries none.
    pub lot_id: Option<String>,
}

impl ReplayOptions {
    pub fn new(window_ms: i64) -> Self {
        Self { window_ms, epoch: None, from: None, to: None, lot_id: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub lot_id: String,
    pub rollups: Vec<Rollup>,
    pub entries: usize,
    /// Unparseable log lines, including a torn tail.
    pub skipped: usize,
    /// Accepted-looking events the table still refused.
    pub inconsistent: usize,
}

fn boundary_at_or_after(ts: EpochMs, epoch: EpochMs, period: i64) -> EpochMs {
    if (ts - epoch).rem_euclid(period) == 0 {
        ts
    } else {
        next_boundary_after(ts, epoch, period)
    }
}

pub fn replay_entries(entries: &[LogEntry], opts: &ReplayOptions) -> ReplayOutcome {
    assert!(opts.window_ms > 0, "window length must be positive");
    let period = opts.window_ms;
    let lot_id = opts
        .lot_id
        .clone()
        .or_else(|| {
            entries.iter().find_map(|e| match e {
                LogEntry::Event(ev) => Some(ev.lot_id.clone()),
                LogEntry::Marker(_) => None,
            })
        })
        .unwrap_or_else(|| "unknown".into());
    let mut out = ReplayOutcome { lot_id, entries: entries.len(), ..ReplayOutcome::default() };

    let first = match (entries.first().map(LogEntry::ts), opts.from) {
        (Some(a), Some(b)) => a.min(b),
        (a, b) => match a.or(b) {
            Some(t) => t,
            None => return out,
        },
    };
    let epoch = opts.epoch.unwrap_or_else(|| utc_midnight(opts.from.unwrap_or(first)));
    let end = opts.to.unwrap_or_else(|| {
        let last_flush = entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Marker(MarkerLine { ts, marker: MarkerKind::Flush, .. }) => Some(*ts),
                _ => None,
            })
            .max();
        let last = entries.iter().map(LogEntry::ts).max().unwrap_or(first);
        boundary_at_or_after(last, epoch, period).max(last_flush.unwrap_or(EpochMs::MIN))
    });
    let from = opts.from.unwrap_or(EpochMs::MIN);

    let mut table = StateTable::new();
    let mut boundary = next_boundary_after(first, epoch, period);
    let roll = |table: &mut StateTable, boundary: EpochMs, out: &mut ReplayOutcome| {
        let window = RollupWindow::ending_at(boundary, period);
        let rollup = table.rollup(window).expect("entries past the boundary are not applied yet");
        if window.start >= from {
            out.rollups.push(rollup);
        }
    };
    for entry in entries {
        while boundary < entry.ts() && boundary <= end {
            roll(&mut table, boundary, &mut out);
            boundary += period;
        }
        if entry.ts() > end {
            break;
        }
        match entry {
            LogEntry::Event(e) if !e.rejected => {
                if table.apply(&e.to_event()).is_err() {
                    out.inconsistent += 1;
                }
            }
            LogEntry::Event(_) => {}
            LogEntry::Marker(MarkerLine { ts, marker: MarkerKind::Disconnect, .. }) => {
                if table.invalidate_all(*ts).is_err() {
                    out.inconsistent += 1;
                }
            }
            LogEntry::Marker(MarkerLine { marker: MarkerKind::Flush, .. }) => {}
        }
    }
    while boundary <= end {
        roll(&mut table, boundary, &mut out);
        boundary += period;
    }
    out
}

pub fn replay_log(log_path: &Path, opts: &ReplayOptions) -> io::Result<ReplayOutcome> {
    let contents = read_log(log_path)?;
    let mut out = replay_entries(&contents.entries, opts);
    out.skipped = contents.skipped;
    Ok(out)
}

/// Writes one CSV per replayed window into `out_dir`.
pub fn write_replay(outcome: &ReplayOutcome, out_dir: &Path) -> io::Result<Vec<PathBuf>> {
    outcome.rollups.iter().map(|r| write_csv(&r.records, r.window.start, &outcome.lot_id, out_dir)).collect()
}
