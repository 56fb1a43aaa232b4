//! Brute-force occupancy reference.
//!
//! Shares no code with [`crate::model::StateTable`]: each bay's status is
//! treated as a step function defined by its most recent event, and the
//! occupied measure inside the window is summed interval by interval.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{BayId, BayStatus, EpochMs, OccupancyEvent, RollupWindow};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("trace is not sorted by timestamp at index {index} ({prev} > {next})")]
    Unsorted { index: usize, prev: EpochMs, next: EpochMs },
}

/// Occupied milliseconds per bay inside `[window.start, window.end]`.
///
/// Every bay with at least one event at or before `window.end` gets an entry,
/// even when it was never occupied in the window.
pub fn oracle_occupancy(trace: &[OccupancyEvent], window: RollupWindow) -> Result<BTreeMap<BayId, u64>, OracleError> {
    for (i, pair) in trace.windows(2).enumerate() {
        if pair[1].ts < pair[0].ts {
            return Err(OracleError::Unsorted { index: i + 1, prev: pair[0].ts, next: pair[1].ts });
        }
    }

    let mut steps: BTreeMap<BayId, Vec<(EpochMs, BayStatus)>> = BTreeMap::new();
    for e in trace.iter().filter(|e| e.ts <= window.end) {
        steps.entry(e.bay_id).or_default().push((e.ts, e.status));
    }

    let mut out = BTreeMap::new();
    for (bay, steps) in steps {
        let mut total = 0u64;
        for (i, &(from, status)) in steps.iter().enumerate() {
            if status != BayStatus::Occupied {
                continue;
            }
            let to = steps.get(i + 1).map_or(window.end, |&(t, _)| t);
            let lo = from.max(window.start);
            let hi = to.min(window.end);
            if hi > lo {
                total += (hi - lo) as u64;
            }
        }
        out.insert(bay, total);
    }
    Ok(out)
}
