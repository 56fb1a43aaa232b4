//! Time sources. Every component reads time through [`Clock`] so a harness
//! can substitute a [`VirtualClock`] and step a week of traffic in seconds.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::model::{EpochMs, DAY_MS};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> EpochMs;

    /// Real time needed for this clock to advance by `ms`.
    fn real_duration(&self, ms: i64) -> Duration;
}

/// Manually stepped clock; clones share the same reading.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<AtomicI64>,
}

impl VirtualClock {
    pub fn new(start: EpochMs) -> Self {
        Self { now: Arc::new(AtomicI64::new(start)) }
    }

    /// Moves the clock forward to `t`. Never moves it backwards.
    pub fn advance_to(&self, t: EpochMs) {
        self.now.fetch_max(t, Ordering::AcqRel);
    }

    pub fn advance(&self, ms: i64) {
        self.now.fetch_add(ms.max(0), Ordering::AcqRel);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> EpochMs {
        self.now.load(Ordering::Acquire)
    }

    fn real_duration(&self, _ms: i64) -> Duration {
        Duration::ZERO
    }
}

/// Wall-clock driven time that starts at `start` and runs `warp` times faster
/// than real time. `warp = 1` with `start = now` is plain wall time.
#[derive(Debug, Clone)]
pub struct WarpedClock {
    start: EpochMs,
    origin: Instant,
    warp: f64,
}

impl WarpedClock {
    pub fn new(start: EpochMs, warp: f64) -> Self {
        assert!(warp > 0.0, "time warp must be positive");
        Self { start, origin: Instant::now(), warp }
    }

    pub fn wall() -> Self {
        Self::new(system_now_ms(), 1.0)
    }
}

impl Clock for WarpedClock {
    fn now_ms(&self) -> EpochMs {
        let elapsed = self.origin.elapsed().as_secs_f64() * 1000.0 * self.warp;
        self.start + elapsed as i64
    }

    fn real_duration(&self, ms: i64) -> Duration {
        Duration::from_secs_f64(ms.max(0) as f64 / 1000.0 / self.warp)
    }
}

pub fn system_now_ms() -> EpochMs {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as EpochMs)
}

/// UTC midnight at or before `ts`.
pub fn utc_midnight(ts: EpochMs) -> EpochMs {
    ts.div_euclid(DAY_MS) * DAY_MS
}

/// Smallest `epoch + k * period` strictly greater than `ts`.
pub fn next_boundary_after(ts: EpochMs, epoch: EpochMs, period_ms: i64) -> EpochMs {
    let k = (ts - epoch).div_euclid(period_ms) + 1;
    epoch + k * period_ms
}
