//! Simulated sensor gateway.
//!
//! Each bay is an alternating on/off process with exponential holding times.
//! The resulting [`Trace`] is the ground truth: sessions are served a snapshot
//! of the trace state when they join and a `baysUpdate` for every later item.
//! Time inside the simulator is measured in milliseconds from the start of the
//! trace ("sim time").

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BayId, BayStatus};
use crate::wire::{decode_line, BayReport, LotBays, WireMessage};

pub const DEFAULT_BAY_COUNT: u32 = 22;

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("sim time {at} ms outside trace range [0, {duration}]")]
    OutOfRange { at: i64, duration: i64 },
    #[error("invalid sensor model: {0}")]
    InvalidModel(String),
    #[error("invalid scripted trace: {0}")]
    InvalidScript(String),
    #[error("invalid fault spec `{0}`")]
    InvalidFault(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SensorModel {
    pub mean_occupied_min: f64,
    pub mean_free_min: f64,
    pub seed: u64,
}

impl SensorModel {
    /// Mean holding times whose occupied fraction is 7.5 h out of 24 h.
    pub fn calibrated(seed: u64) -> Self {
        Self { mean_occupied_min: 45.0, mean_free_min: 99.0, seed }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        for (name, v) in [("meanOccupiedMin", self.mean_occupied_min), ("meanFreeMin", self.mean_free_min)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GatewayError::InvalidModel(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Long-run fraction of time a bay spends occupied.
    pub fn occupied_fraction(&self) -> f64 {
        self.mean_occupied_min / (self.mean_occupied_min + self.mean_free_min)
    }
}

/// Config-gated misbehaviour of the gateway. Everything is off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Close every session at `at_ms` and refuse connections for `duration_ms`.
    Drop { at_ms: i64, duration_ms: i64 },
    /// Send every `every`-th update of a session twice.
    Duplicate { every: u32 },
    /// Push each update `ms` after it happens.
    Delay { ms: i64 },
}

impl FromStr for Fault {
    type Err = GatewayError;

    /// `drop:<atSec>:<durationSec>`, `duplicate:<every>` or `delay:<ms>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GatewayError::InvalidFault(s.to_owned());
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.trim().parse::<i64>().map_err(|_| bad());
        match parts.as_slice() {
            ["drop", at, dur] => {
                let (at, dur) = (num(at)?, num(dur)?);
                if at < 0 || dur <= 0 {
                    return Err(bad());
                }
                Ok(Fault::Drop { at_ms: at * 1000, duration_ms: dur * 1000 })
            }
            ["duplicate", every] => match num(every)? {
                n if n >= 1 => Ok(Fault::Duplicate { every: u32::try_from(n).map_err(|_| bad())? }),
                _ => Err(bad()),
            },
            ["delay", ms] => match num(ms)? {
                n if n >= 0 => Ok(Fault::Delay { ms: n }),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Fault::Drop { at_ms, duration_ms } => write!(f, "drop:{}:{}", at_ms / 1000, duration_ms / 1000),
            Fault::Duplicate { every } => write!(f, "duplicate:{every}"),
            Fault::Delay { ms } => write!(f, "delay:{ms}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub faults: Vec<Fault>,
}

impl FaultPlan {
    pub fn drops(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        self.faults.iter().filter_map(|f| match *f {
            Fault::Drop { at_ms, duration_ms } => Some((at_ms, duration_ms)),
            _ => None,
        })
    }

    /// Whether the gateway refuses connections at `sim_ts`.
    pub fn is_down(&self, sim_ts: i64) -> bool {
        self.drops().any(|(at, dur)| sim_ts >= at && sim_ts < at + dur)
    }

    pub fn delay_ms(&self) -> i64 {
        self.faults
            .iter()
            .map(|f| match *f {
                Fault::Delay { ms } => ms,
                _ => 0,
            })
            .sum()
    }

    pub fn duplicate_every(&self) -> Option<u32> {
        self.faults.iter().find_map(|f| match *f {
            Fault::Duplicate { every } => Some(every),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub listen_address: String,
    pub lot_id: String,
    pub bay_count: u32,
    pub model: SensorModel,
    /// Simulated seconds per real second when served over a socket.
    pub time_warp: f64,
    pub faults: FaultPlan,
}

impl GatewayConfig {
    pub fn new(lot_id: impl Into<String>, bay_count: u32, model: SensorModel) -> Self {
        Self {
            listen_address: "127.0.0.1:7400".into(),
            lot_id: lot_id.into(),
            bay_count,
            model,
            time_warp: 1.0,
            faults: FaultPlan::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceItem {
    pub sim_ts: i64,
    pub bay_id: BayId,
    pub new_status: BayStatus,
}

/// Ground-truth status changes of every bay, sorted by `(sim_ts, bay_id)`.
/// Each bay's first item sits at `sim_ts = 0` and sets its initial status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub bay_count: u32,
    pub duration_ms: i64,
    pub items: Vec<TraceItem>,
}

impl Trace {
    /// Hand-written trace: every bay starts in `initial`, then the given
    /// `(sim_ts, bay, status)` changes apply. Each bay must alternate.
    pub fn scripted(
        bay_count: u32,
        initial: BayStatus,
        changes: &[(i64, u32, BayStatus)],
        duration_ms: i64,
    ) -> Result<Self, GatewayError> {
        let mut items: Vec<TraceItem> =
            (1..=bay_count).map(|b| TraceItem { sim_ts: 0, bay_id: BayId(b), new_status: initial }).collect();
        let mut sorted = changes.to_vec();
        sorted.sort_by_key(|&(ts, bay, _)| (ts, bay));
        let mut current = vec![initial; bay_count as usize];
        for (ts, bay, status) in sorted {
            if bay == 0 || bay > bay_count {
                return Err(GatewayError::InvalidScript(format!("bay {bay} outside 1..={bay_count}")));
            }
            if ts <= 0 || ts > duration_ms {
                return Err(GatewayError::InvalidScript(format!("change at {ts} ms outside (0, {duration_ms}]")));
            }
            let slot = &mut current[bay as usize - 1];
            if *slot == status {
                return Err(GatewayError::InvalidScript(format!("bay {bay} is already {status} at {ts} ms")));
            }
            *slot = status;
            items.push(TraceItem { sim_ts: ts, bay_id: BayId(bay), new_status: status });
        }
        items.sort_by_key(|i| (i.sim_ts, i.bay_id));
        Ok(Self { bay_count, duration_ms, items })
    }

    /// Status of every bay after all items at or before `sim_ts`.
    pub fn statuses_at(&self, sim_ts: i64) -> Vec<BayStatus> {
        let mut statuses = vec![BayStatus::Free; self.bay_count as usize];
        for item in self.items.iter().take_while(|i| i.sim_ts <= sim_ts) {
            if let Some(slot) = statuses.get_mut(item.bay_id.0 as usize - 1) {
                *slot = item.new_status;
            }
        }
        statuses
    }

    /// Index of the first item strictly after `sim_ts`.
    pub fn first_after(&self, sim_ts: i64) -> usize {
        self.items.partition_point(|i| i.sim_ts <= sim_ts)
    }

    /// Changes after the initial statuses.
    pub fn change_count(&self) -> usize {
        self.items.iter().filter(|i| i.sim_ts > 0).count()
    }
}

/// Draws a trace from the sensor model. Fully determined by the seed, the bay
/// count, the two means and the duration.
pub fn generate_trace(config: &GatewayConfig, duration_ms: i64) -> Result<Trace, GatewayError> {
    config.model.validate()?;
    if duration_ms <= 0 {
        return Err(GatewayError::InvalidModel(format!("duration must be positive, got {duration_ms} ms")));
    }
    let model = config.model;
    let p_occupied = model.occupied_fraction();
    let holding = |mean_min: f64| Exp::new(1.0 / (mean_min * 60_000.0)).expect("validated mean");
    let occupied_hold = holding(model.mean_occupied_min);
    let free_hold = holding(model.mean_free_min);

    let mut items = Vec::new();
    for bay in 1..=config.bay_count {
        // One ChaCha stream per bay keeps bays independent of each other and
        // of the bay count.
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        rng.set_stream(u64::from(bay));
        let mut status = if rng.random_bool(p_occupied) { BayStatus::Occupied } else { BayStatus::Free };
        items.push(TraceItem { sim_ts: 0, bay_id: BayId(bay), new_status: status });
        let mut t = 0i64;
        loop {
            let dist = if status.is_occupied() { &occupied_hold } else { &free_hold };
            let hold: f64 = dist.sample(&mut rng);
            t += (hold.ceil() as i64).max(1);
            if t >= duration_ms {
                break;
            }
            status = if status.is_occupied() { BayStatus::Free } else { BayStatus::Occupied };
            items.push(TraceItem { sim_ts: t, bay_id: BayId(bay), new_status: status });
        }
    }
    items.sort_by_key(|i| (i.sim_ts, i.bay_id));
    Ok(Trace { bay_count: config.bay_count, duration_ms, items })
}

/// The `bays` message a client joining at `sim_ts` receives.
pub fn snapshot_at(trace: &Trace, sim_ts: i64, config: &GatewayConfig) -> Result<WireMessage, GatewayError> {
    if sim_ts < 0 || sim_ts > trace.duration_ms {
        return Err(GatewayError::OutOfRange { at: sim_ts, duration: trace.duration_ms });
    }
    let bays = trace
        .statuses_at(sim_ts)
        .into_iter()
        .zip(1..)
        .map(|(status, id)| BayReport { id: BayId(id), status })
        .collect();
    Ok(WireMessage::Bays { data: vec![LotBays { lot_id: config.lot_id.clone(), bays }] })
}

/// Read-only state shared by every session.
#[derive(Debug, Clone)]
pub struct Gateway {
    pub config: GatewayConfig,
    pub trace: Trace,
}

impl Gateway {
    pub fn new(config: GatewayConfig, trace: Trace) -> Self {
        Self { config, trace }
    }

    fn snapshot(&self, sim_ts: i64) -> WireMessage {
        let at = sim_ts.clamp(0, self.trace.duration_ms);
        snapshot_at(&self.trace, at, &self.config).expect("clamped into range")
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct SessionReply {
    pub messages: Vec<WireMessage>,
    pub close: bool,
}

/// Protocol state of one client session. Transport-agnostic: the caller feeds
/// it client lines and asks it for due pushes at the current sim time.
#[derive(Debug, Clone, Default)]
pub struct GatewaySession {
    /// Next trace item to push, set once the client said hello.
    cursor: Option<usize>,
    pushed: u64,
}

impl GatewaySession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_joined(&self) -> bool {
        self.cursor.is_some()
    }

    pub fn on_line(&mut self, gw: &Gateway, line: &str, sim_now: i64) -> SessionReply {
        match decode_line(line) {
            Ok(msg) => self.on_message(gw, msg, sim_now),
            Err(e) => SessionReply { messages: vec![WireMessage::error(e.to_string())], close: true },
        }
    }

    pub fn on_message(&mut self, gw: &Gateway, msg: WireMessage, sim_now: i64) -> SessionReply {
        match msg {
            WireMessage::Hello { .. } => {
                self.cursor = Some(gw.trace.first_after(sim_now));
                SessionReply { messages: vec![gw.snapshot(sim_now)], close: false }
            }
            WireMessage::Ping { seq } => SessionReply { messages: vec![WireMessage::Pong { seq }], close: false },
            other => SessionReply {
                messages: vec![WireMessage::error(format!("unexpected `{}` message", other.kind()))],
                close: true,
            },
        }
    }

    /// Sim time at which the next push falls due, if any.
    pub fn next_due(&self, gw: &Gateway) -> Option<i64> {
        let item = gw.trace.items.get(self.cursor?)?;
        Some(item.sim_ts + gw.config.faults.delay_ms())
    }

    /// `baysUpdate` messages for every item that fell due by `sim_now`.
    pub fn due_updates(&mut self, gw: &Gateway, sim_now: i64) -> Vec<WireMessage> {
        let Some(cursor) = self.cursor.as_mut() else {
            return Vec::new();
        };
        let delay = gw.config.faults.delay_ms();
        let duplicate_every = gw.config.faults.duplicate_every();
        let mut out = Vec::new();
        while let Some(item) = gw.trace.items.get(*cursor) {
            if item.sim_ts + delay > sim_now {
                break;
            }
            *cursor += 1;
            let msg = WireMessage::BaysUpdate {
                lot_id: gw.config.lot_id.clone(),
                bay: BayReport { id: item.bay_id, status: item.new_status },
            };
            self.pushed += 1;
            if duplicate_every.is_some_and(|n| self.pushed % u64::from(n) == 0) {
                out.push(msg.clone());
            }
            out.push(msg);
        }
        out
    }
}
