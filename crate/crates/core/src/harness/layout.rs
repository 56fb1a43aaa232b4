//! On-disk layout of a simulation run directory.
//!
//! ```text
//! <run>/scenario.toml      scenario as given
//! <run>/run.json           manifest (start, window grid, lot)
//! <run>/trace.jsonl        ground-truth trace, sim-relative ms
//! <run>/agent/events.log   agent write-ahead log (outbox/, dead-letter/ beside it)
//! <run>/csv/               agent roll-up CSVs
//! <run>/hub/               hub store
//! <run>/ledger.json        traffic ledger
//! <run>/summary.md         human-readable summary
//! ```

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gateway::{Trace, TraceItem};
use crate::model::{EpochMs, RollupWindow};

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn scenario(&self) -> PathBuf {
        self.root.join("scenario.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.jsonl")
    }

    pub fn agent_dir(&self) -> PathBuf {
        self.root.join("agent")
    }

    pub fn event_log(&self) -> PathBuf {
        self.agent_dir().join("events.log")
    }

    pub fn csv_dir(&self) -> PathBuf {
        self.root.join("csv")
    }

    pub fn hub_dir(&self) -> PathBuf {
        self.root.join("hub")
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.md")
    }

    pub fn create(&self) -> io::Result<()> {
        for dir in [self.agent_dir(), self.csv_dir(), self.hub_dir()] {
            fs::create_dir_all(dir)?;
        }
        Ok(())
    }
}

/// What `verify` and the reports need to know about a finished run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub name: String,
    pub lot_id: String,
    pub bay_count: u32,
    pub start_ms: EpochMs,
    pub end_ms: EpochMs,
    pub window_epoch: EpochMs,
    pub rollup_period_ms: i64,
}

impl RunManifest {
    /// Every window the agent closes between the run start and end.
    pub fn windows(&self) -> Vec<RollupWindow> {
        let mut out = Vec::new();
        let mut end = crate::clock::next_boundary_after(self.start_ms, self.window_epoch, self.rollup_period_ms);
        while end <= self.end_ms {
            out.push(RollupWindow::ending_at(end, self.rollup_period_ms));
            end += self.rollup_period_ms;
        }
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self).expect("manifest serializes"))
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TraceHeader {
    bay_count: u32,
    duration_ms: i64,
}

/// First line is `{"bayCount":..,"durationMs":..}`, then one item per line.
pub fn write_trace(trace: &Trace, path: &Path) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    let header = TraceHeader { bay_count: trace.bay_count, duration_ms: trace.duration_ms };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for item in &trace.items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace(path: &Path) -> io::Result<Trace> {
    let bad = |e: serde_json::Error| io::Error::new(io::ErrorKind::InvalidData, e);
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let header: TraceHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(bad)?,
        None => return Err(io::Error::new(io::ErrorKind::InvalidData, "empty trace file")),
    };
    let mut items = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            items.push(serde_json::from_str::<TraceItem>(&line).map_err(bad)?);
        }
    }
    Ok(Trace { bay_count: header.bay_count, duration_ms: header.duration_ms, items })
}
