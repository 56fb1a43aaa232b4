//! Upstream traffic accounting: what forwarding every raw update would have
//! cost against what the roll-up envelopes actually cost.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::log::{read_log, LogEntry};
use crate::hub::HubStore;
use crate::model::EventKind;
use crate::wire::{encode_line, BayReport, WireMessage};

use super::layout::RunPaths;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrafficLedger {
    /// Bytes of `baysUpdate` lines for every update the agent received.
    pub raw_forward_bytes: u64,
    /// Bytes of `rollup` lines for every window the hub stored.
    pub aggregated_bytes: u64,
    pub event_count: u64,
    pub envelope_count: u64,
    /// `aggregated / raw`; absent when nothing was received.
    pub reduction_ratio: Option<f64>,
}

impl TrafficLedger {
    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("ledger serializes"))
    }
}

/// Builds the ledger for a run directory from the agent log and hub store.
pub fn traffic_report(run_dir: &Path) -> io::Result<TrafficLedger> {
    let paths = RunPaths::new(run_dir);
    let log = read_log(&paths.event_log())?;
    let mut raw = 0u64;
    let mut events = 0u64;
    for entry in &log.entries {
        if let LogEntry::Event(e) = entry {
            if e.src == EventKind::Update {
                let msg = WireMessage::BaysUpdate {
                    lot_id: e.lot_id.clone(),
                    bay: BayReport { id: e.bay_id, status: e.status },
                };
                raw += encode_line(&msg).len() as u64;
                events += 1;
            }
        }
    }
    let mut aggregated = 0u64;
    let mut envelopes = 0u64;
    if paths.hub_dir().is_dir() {
        let hub = HubStore::open(paths.hub_dir()).map_err(|e| io::Error::other(e.to_string()))?;
        for lot in hub.lots() {
            for stored in hub.windows(&lot) {
                aggregated += encode_line(&WireMessage::Rollup(stored.to_envelope())).len() as u64;
                envelopes += 1;
            }
        }
    }
    Ok(TrafficLedger {
        raw_forward_bytes: raw,
        aggregated_bytes: aggregated,
        event_count: events,
        envelope_count: envelopes,
        reduction_ratio: (raw > 0).then(|| aggregated as f64 / raw as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run_has_no_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = traffic_report(dir.path()).unwrap();
        assert_eq!(ledger.raw_forward_bytes, 0);
        assert_eq!(ledger.reduction_ratio, None);
    }
}
