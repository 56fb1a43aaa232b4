//! Append-only JSON-lines event log.
//!
//! Event lines: `{"ts":..,"lotId":"..","bayId":..,"status":"..","src":"snapshot"|"update"}`.
//! Marker lines: `{"ts":..,"marker":"flush","windowStart":..}` after a roll-up
//! and `{"ts":..,"marker":"disconnect"}` when the gateway session is lost.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::model::{BayId, BayStatus, EpochMs, EventKind, OccupancyEvent, RollupWindow, StateTable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EventLine {
    pub ts: EpochMs,
    pub lot_id: String,
    pub bay_id: BayId,
    pub status: BayStatus,
    pub src: EventKind,
    /// Set when the state machine refused the event (clock regression).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected: bool,
}

impl EventLine {
    pub fn to_event(&self) -> OccupancyEvent {
        OccupancyEvent {
            kind: self.src,
            ts: self.ts,
            lot_id: self.lot_id.clone(),
            bay_id: self.bay_id,
            status: self.status,
        }
    }
}

impl From<&OccupancyEvent> for EventLine {
    fn from(e: &OccupancyEvent) -> Self {
        Self { ts: e.ts, lot_id: e.lot_id.clone(), bay_id: e.bay_id, status: e.status, src: e.kind, rejected: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerKind {
    Flush,
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MarkerLine {
    pub ts: EpochMs,
    pub marker: MarkerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_start: Option<EpochMs>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogEntry {
    Event(EventLine),
    Marker(MarkerLine),
}

impl LogEntry {
    pub fn ts(&self) -> EpochMs {
        match self {
            LogEntry::Event(e) => e.ts,
            LogEntry::Marker(m) => m.ts,
        }
    }

    pub fn flush(ts: EpochMs, window_start: EpochMs) -> Self {
        LogEntry::Marker(MarkerLine { ts, marker: MarkerKind::Flush, window_start: Some(window_start) })
    }

    pub fn disconnect(ts: EpochMs) -> Self {
        LogEntry::Marker(MarkerLine { ts, marker: MarkerKind::Disconnect, window_start: None })
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("log entries always serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    pub fn open(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, entry: &LogEntry) -> io::Result<()> {
        self.file.write_all(entry.to_line().as_bytes())
    }

    pub fn sync(&mut self) -> io::Result<()> {
        self.file.sync_data()
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LogContents {
    pub entries: Vec<LogEntry>,
    /// Lines that did not parse, including a torn final line.
    pub skipped: usize,
}

/// Reads a log, skipping lines that do not parse. A missing file reads as
/// empty.
pub fn read_log(path: &Path) -> io::Result<LogContents> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(LogContents::default()),
        Err(e) => return Err(e),
    };
    let mut out = LogContents::default();
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        let complete = buf.last() == Some(&b'\n');
        let parsed = std::str::from_utf8(&buf)
            .ok()
            .filter(|_| complete)
            .and_then(|s| serde_json::from_str::<LogEntry>(s.trim_end()).ok());
        match parsed {
            Some(entry) => out.entries.push(entry),
            None if buf.iter().all(u8::is_ascii_whitespace) => {}
            None => {
                warn!(path = %path.display(), torn = !complete, "skipping unreadable log line");
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

/// Applies one log entry the way the live agent did, honouring markers.
/// Returns the window a flush marker closed, if any.
pub fn replay_entry(table: &mut StateTable, entry: &LogEntry) -> Option<RollupWindow> {
    match entry {
        LogEntry::Event(e) if !e.rejected => {
            // Entries were accepted live, so re-applying them cannot fail.
            let _ = table.apply(&e.to_event());
            None
        }
        LogEntry::Event(_) => None,
        LogEntry::Marker(MarkerLine { ts, marker: MarkerKind::Disconnect, .. }) => {
            let _ = table.invalidate_all(*ts);
            None
        }
        LogEntry::Marker(MarkerLine { ts, marker: MarkerKind::Flush, window_start }) => {
            let window = RollupWindow { start: window_start.unwrap_or(*ts), end: *ts };
            let _ = table.rollup(window);
            Some(window)
        }
    }
}
