//! Cloud hub: deduplicating, durable store of roll-up envelopes plus the
//! daily and weekly queries served on top of it.
//!
//! Each lot gets one append-only JSON-lines file. The key index is rebuilt
//! from those files on startup.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::agent::UploadEnvelope;
use crate::model::{BayId, EpochMs, RollupRecord, DAY_MS};
use crate::wire::WireMessage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoredRollup {
    pub idempotency_key: String,
    pub lot_id: String,
    pub window_start: EpochMs,
    pub window_end: EpochMs,
    pub records: Vec<RollupRecord>,
    pub received_at: EpochMs,
}

impl StoredRollup {
    pub fn to_envelope(&self) -> UploadEnvelope {
        UploadEnvelope {
            lot_id: self.lot_id.clone(),
            window_start: self.window_start,
            window_end: self.window_end,
            records: self.records.clone(),
            idempotency_key: self.idempotency_key.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WeeklyReport {
    pub lot_id: String,
    pub week_start: EpochMs,
    /// Seven entries; `None` where no roll-up was stored for that day.
    pub per_day_fleet_avg_hours: Vec<Option<f64>>,
    pub per_bay_min_hours: BTreeMap<BayId, f64>,
    pub per_bay_max_hours: BTreeMap<BayId, f64>,
}

#[derive(Debug, Error)]
pub enum HubError {
    #[error("invalid envelope: {0}")]
    Invalid(String),
    #[error("hub store i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Receipt {
    Stored,
    Duplicate,
}

#[derive(Debug)]
pub struct HubStore {
    dir: PathBuf,
    by_key: BTreeMap<String, StoredRollup>,
    by_window: BTreeMap<(String, EpochMs), String>,
}

fn lot_file_name(lot_id: &str) -> String {
    let safe: String =
        lot_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.jsonl")
}

impl HubStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, HubError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut store = Self { dir, by_key: BTreeMap::new(), by_window: BTreeMap::new() };
        let mut files: Vec<PathBuf> = fs::read_dir(&store.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        for path in files {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<StoredRollup>(&line) {
                    Ok(rec) => store.index(rec),
                    Err(e) => warn!(path = %path.display(), error = %e, "skipping unreadable hub record"),
                }
            }
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn index(&mut self, rec: StoredRollup) {
        if self.by_key.contains_key(&rec.idempotency_key) {
            return;
        }
        self.by_window.insert((rec.lot_id.clone(), rec.window_start), rec.idempotency_key.clone());
        self.by_key.insert(rec.idempotency_key.clone(), rec);
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    /// Persists the envelope unless its key was seen before. The record is on
    /// disk before this returns `Stored`.
    pub fn receive(&mut self, envelope: UploadEnvelope, now: EpochMs) -> Result<Receipt, HubError> {
        envelope.validate().map_err(HubError::Invalid)?;
        if self.by_key.contains_key(&envelope.idempotency_key) {
            return Ok(Receipt::Duplicate);
        }
        let rec = StoredRollup {
            idempotency_key: envelope.idempotency_key,
            lot_id: envelope.lot_id,
            window_start: envelope.window_start,
            window_end: envelope.window_end,
            records: envelope.records,
            received_at: now,
        };
        let mut line = serde_json::to_vec(&rec).expect("stored rollups serialize");
        line.push(b'\n');
        let mut file = OpenOptions::new().create(true).append(true).open(self.dir.join(lot_file_name(&rec.lot_id)))?;
        file.write_all(&line)?;
        file.sync_data()?;
        self.index(rec);
        Ok(Receipt::Stored)
    }

    pub fn get(&self, lot_id: &str, window_start: EpochMs) -> Option<&StoredRollup> {
        self.by_window.get(&(lot_id.to_owned(), window_start)).and_then(|k| self.by_key.get(k))
    }

    pub fn query_daily(&self, lot_id: &str, window_start: EpochMs) -> Option<&[RollupRecord]> {
        self.get(lot_id, window_start).map(|r| r.records.as_slice())
    }

    /// Every stored window of a lot in time order.
    pub fn windows(&self, lot_id: &str) -> impl Iterator<Item = &StoredRollup> {
        let lot = lot_id.to_owned();
        self.by_window.range((lot.clone(), EpochMs::MIN)..=(lot, EpochMs::MAX)).filter_map(|(_, k)| self.by_key.get(k))
    }

    pub fn lots(&self) -> Vec<String> {
        let mut lots: Vec<String> = self.by_window.keys().map(|(l, _)| l.clone()).collect();
        lots.dedup();
        lots
    }

    pub fn weekly_report(&self, lot_id: &str, week_start: EpochMs) -> Option<WeeklyReport> {
        let week_end = week_start + 7 * DAY_MS;
        let mut days: [Option<Vec<&RollupRecord>>; 7] = Default::default();
        for rec in self.windows(lot_id).filter(|r| r.window_start >= week_start && r.window_start < week_end) {
            let day = ((rec.window_start - week_start) / DAY_MS) as usize;
            days[day].get_or_insert_with(Vec::new).extend(&rec.records);
        }
        if days.iter().all(Option::is_none) {
            return None;
        }
        let per_day: Vec<Option<BTreeMap<BayId, f64>>> =
            days.iter().map(|d| d.as_ref().map(|records| day_hours(records.iter().copied()))).collect();
        let (per_bay_min_hours, per_bay_max_hours) = bay_extremes(per_day.iter().flatten());
        Some(WeeklyReport {
            lot_id: lot_id.to_owned(),
            week_start,
            per_day_fleet_avg_hours: per_day.iter().map(|d| d.as_ref().map(fleet_average)).collect(),
            per_bay_min_hours,
            per_bay_max_hours,
        })
    }

    /// Protocol dispatcher for one client message.
    pub fn handle(&mut self, msg: WireMessage, now: EpochMs) -> WireMessage {
        match msg {
            WireMessage::Rollup(envelope) => {
                let key = envelope.idempotency_key.clone();
                match self.receive(envelope, now) {
                    Ok(_) => WireMessage::Ack { key },
                    Err(e) => WireMessage::error(e.to_string()),
                }
            }
            WireMessage::QueryDaily { lot_id, window_start } => match self.query_daily(&lot_id, window_start) {
                Some(records) => WireMessage::Daily { records: records.to_vec() },
                None => WireMessage::NotFound,
            },
            WireMessage::QueryWeekly { lot_id, week_start } => match self.weekly_report(&lot_id, week_start) {
                Some(report) => WireMessage::Weekly(report),
                None => WireMessage::NotFound,
            },
            WireMessage::Ping { seq } => WireMessage::Pong { seq },
            other => WireMessage::error(format!("unexpected `{}` message", other.kind())),
        }
    }
}

/// Occupied hours per bay for one day, summing every window of that day.
pub fn day_hours<'a>(records: impl IntoIterator<Item = &'a RollupRecord>) -> BTreeMap<BayId, f64> {
    let mut secs: BTreeMap<BayId, u64> = BTreeMap::new();
    for r in records {
        *secs.entry(r.bay_id).or_default() += r.occupation_time_sec;
    }
    secs.into_iter().map(|(bay, s)| (bay, s as f64 / 3600.0)).collect()
}

pub fn fleet_average(hours: &BTreeMap<BayId, f64>) -> f64 {
    if hours.is_empty() {
        return 0.0;
    }
    hours.values().sum::<f64>() / hours.len() as f64
}

/// Per-bay minimum and maximum daily hours over the given days. Bays absent
/// from a day do not count for that day.
pub fn bay_extremes<'a>(
    days: impl IntoIterator<Item = &'a BTreeMap<BayId, f64>>,
) -> (BTreeMap<BayId, f64>, BTreeMap<BayId, f64>) {
    let mut min: BTreeMap<BayId, f64> = BTreeMap::new();
    let mut max: BTreeMap<BayId, f64> = BTreeMap::new();
    for day in days {
        for (&bay, &h) in day {
            min.entry(bay).and_modify(|m| *m = m.min(h)).or_insert(h);
            max.entry(bay).and_modify(|m| *m = m.max(h)).or_insert(h);
        }
    }
    (min, max)
}
