//! The edge agent: stamps gateway events, keeps a write-ahead log, runs the
//! occupancy state machine, rolls windows up into CSV files and uploads them.
//!
//! [`EdgeAgent`] performs no network I/O itself. A driver (the in-process
//! harness or the socket runtime in [`crate::net`]) moves messages between it
//! and the outside world and tells it what time it is.

pub mod csv;
pub mod log;
pub mod ping;
pub mod upload;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;
use tracing::{info, warn};

use crate::clock::{next_boundary_after, utc_midnight};
use crate::model::{EpochMs, EventKind, ModelError, OccupancyEvent, Rollup, RollupWindow, StateTable, Warning};
use crate::wire::{WireMessage, PROTOCOL_VERSION};

pub use self::csv::{csv_file_name, write_csv};
pub use self::log::{read_log, EventLog, LogEntry};
pub use self::ping::{PingAction, PingTracker};
pub use self::upload::{Backoff, BackoffPolicy, UploadEnvelope, Uploader};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Real,
    Virtual,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(ClockMode::Real),
            "virtual" => Ok(ClockMode::Virtual),
            other => Err(format!("unknown clock mode `{other}` (expected real|virtual)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub gateway_address: String,
    pub cloud_address: String,
    pub poll_interval_sec: u64,
    pub rollup_period_sec: u64,
    pub log_path: PathBuf,
    pub csv_dir: PathBuf,
    pub clock_mode: ClockMode,
    pub time_warp: f64,
    pub reconnect_backoff: BackoffPolicy,
    pub ack_timeout_ms: i64,
    /// Origin of the roll-up window grid. Defaults to UTC midnight of the
    /// first logged event, or of the start time for a fresh log.
    pub window_epoch: Option<EpochMs>,
    pub client_name: String,
}

impl AgentConfig {
    pub fn new(log_path: impl Into<PathBuf>, csv_dir: impl Into<PathBuf>) -> Self {
        Self {
            gateway_address: "127.0.0.1:7400".into(),
            cloud_address: "127.0.0.1:7500".into(),
            poll_interval_sec: 60,
            rollup_period_sec: 86_400,
            log_path: log_path.into(),
            csv_dir: csv_dir.into(),
            clock_mode: ClockMode::Real,
            time_warp: 1.0,
            reconnect_backoff: BackoffPolicy::default(),
            ack_timeout_ms: 10_000,
            window_epoch: None,
            client_name: "edge-agent".into(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.poll_interval_sec < 1 {
            return Err(AgentError::Config("poll interval must be at least 1 s".into()));
        }
        if self.rollup_period_sec < self.poll_interval_sec {
            return Err(AgentError::Config("roll-up period must not be shorter than the poll interval".into()));
        }
        if !(self.time_warp.is_finite() && self.time_warp > 0.0) {
            return Err(AgentError::Config("time warp must be positive".into()));
        }
        Ok(())
    }

    pub fn rollup_period_ms(&self) -> i64 {
        self.rollup_period_sec as i64 * 1000
    }

    fn state_dir(&self) -> PathBuf {
        self.log_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    }

    pub fn outbox_dir(&self) -> PathBuf {
        self.state_dir().join("outbox")
    }

    pub fn dead_letter_dir(&self) -> PathBuf {
        self.state_dir().join("dead-letter")
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SessionState {
    Disconnected,
    AwaitingSnapshot,
    Live,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct AgentStats {
    pub warnings: u64,
    pub rejected: u64,
    pub pings_sent: u64,
    pub sessions: u64,
    pub disconnects: u64,
    pub updates: u64,
}

/// What a roll-up produced.
#[derive(Debug, Clone)]
pub struct RolledWindow {
    pub rollup: Rollup,
    pub csv_path: Option<PathBuf>,
    pub envelope: UploadEnvelope,
}

#[derive(Debug)]
pub struct EdgeAgent {
    config: AgentConfig,
    table: StateTable,
    log: EventLog,
    lot_id: Option<String>,
    epoch: EpochMs,
    next_boundary: EpochMs,
    session: SessionState,
    ping: PingTracker,
    uploader: Uploader,
    stats: AgentStats,
}

impl EdgeAgent {
    /// Opens the agent's on-disk state and rebuilds the table from the log.
    pub fn open(config: AgentConfig, now: EpochMs) -> Result<Self, AgentError> {
        config.validate()?;
        let recovered = recover(&config.log_path)?;
        let period = config.rollup_period_ms();
        let epoch = config.window_epoch.unwrap_or_else(|| utc_midnight(recovered.first_ts.unwrap_or(now)));
        let next_boundary = match recovered.last_flush {
            Some(end) => end + period,
            None => next_boundary_after(recovered.first_ts.unwrap_or(now), epoch, period),
        };
        if recovered.replayed > 0 {
            info!(entries = recovered.replayed, bays = recovered.table.len(), "recovered state from log");
        }
        let log = EventLog::open(&config.log_path)?;
        let uploader = Uploader::with_outbox(&config.outbox_dir(), config.reconnect_backoff, config.ack_timeout_ms)?;
        Ok(Self {
            ping: PingTracker::new(config.poll_interval_sec as i64 * 1000),
            config,
            lot_id: recovered.table.lot_id().map(str::to_owned),
            table: recovered.table,
            log,
            epoch,
            next_boundary,
            session: SessionState::Disconnected,
            uploader,
            stats: AgentStats::default(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn table(&self) -> &StateTable {
        &self.table
    }

    pub fn stats(&self) -> &AgentStats {
        &self.stats
    }

    pub fn uploader(&self) -> &Uploader {
        &self.uploader
    }

    pub fn uploader_mut(&mut self) -> &mut Uploader {
        &mut self.uploader
    }

    pub fn lot_id(&self) -> Option<&str> {
        self.lot_id.as_deref()
    }

    pub fn window_epoch(&self) -> EpochMs {
        self.epoch
    }

    pub fn next_boundary(&self) -> EpochMs {
        self.next_boundary
    }

    pub fn next_ping_at(&self) -> Option<EpochMs> {
        self.ping.next_at()
    }

    pub fn is_connected(&self) -> bool {
        self.session != SessionState::Disconnected
    }

    /// A transport connection was established; returns the `hello` to send.
    pub fn begin_session(&mut self, now: EpochMs) -> WireMessage {
        self.session = SessionState::AwaitingSnapshot;
        self.ping.start(now);
        self.stats.sessions += 1;
        WireMessage::Hello { client: self.config.client_name.clone(), proto: PROTOCOL_VERSION }
    }

    /// The gateway session ended (EOF, liveness failure or protocol error).
    /// Open intervals are closed at `now` and every bay becomes unknown until
    /// the next snapshot, so time the agent could not observe never accrues.
    pub fn session_lost(&mut self, now: EpochMs) -> Result<(), AgentError> {
        if self.session == SessionState::Disconnected {
            return Ok(());
        }
        self.session = SessionState::Disconnected;
        self.ping.stop();
        self.stats.disconnects += 1;
        self.log.append(&LogEntry::disconnect(now))?;
        self.table.invalidate_all(now)?;
        Ok(())
    }

    pub fn on_gateway_message(&mut self, msg: WireMessage, now: EpochMs) -> Result<(), AgentError> {
        match msg {
            WireMessage::Bays { data } => {
                let mut seen = std::collections::BTreeSet::new();
                for lot in &data {
                    if let Some(dup) = lot.bays.iter().find(|b| !seen.insert(b.id)) {
                        return Err(AgentError::Protocol(format!("bay {} listed twice in snapshot", dup.id)));
                    }
                }
                for lot in data {
                    self.lot_id.get_or_insert_with(|| lot.lot_id.clone());
                    for bay in lot.bays {
                        self.ingest(OccupancyEvent {
                            kind: EventKind::Snapshot,
                            ts: now,
                            lot_id: lot.lot_id.clone(),
                            bay_id: bay.id,
                            status: bay.status,
                        })?;
                    }
                }
                self.session = SessionState::Live;
                Ok(())
            }
            WireMessage::BaysUpdate { lot_id, bay } => {
                self.stats.updates += 1;
                self.lot_id.get_or_insert_with(|| lot_id.clone());
                self.ingest(OccupancyEvent {
                    kind: EventKind::Update,
                    ts: now,
                    lot_id,
                    bay_id: bay.id,
                    status: bay.status,
                })
            }
            WireMessage::Pong { seq } => {
                self.ping.on_pong(seq);
                Ok(())
            }
            WireMessage::Error { reason } => Err(AgentError::Protocol(format!("gateway error: {reason}"))),
            other => Err(AgentError::Protocol(format!("unexpected `{}` from gateway", other.kind()))),
        }
    }

    /// Write-ahead: the entry hits the log before the table changes.
    fn ingest(&mut self, event: OccupancyEvent) -> Result<(), AgentError> {
        let mut line = log::EventLine::from(&event);
        let regressed = self.table.get(event.bay_id).is_some_and(|b| event.ts < b.last_transition_ts);
        if regressed {
            line.rejected = true;
            self.log.append(&LogEntry::Event(line))?;
            self.stats.rejected += 1;
            warn!(bay = %event.bay_id, ts = event.ts, "rejected event with regressed clock");
            return Ok(());
        }
        self.log.append(&LogEntry::Event(line))?;
        if let Some(w) = self.table.apply(&event)? {
            self.stats.warnings += 1;
            match w {
                Warning::DuplicateStatus(bay) => warn!(%bay, "duplicate status update"),
                Warning::UnknownBay(bay) => warn!(%bay, "update for bay missing from snapshot"),
            }
        }
        Ok(())
    }

    /// Pings that fell due. A [`PingAction::SessionDead`] means the driver
    /// should drop the connection and call [`EdgeAgent::session_lost`].
    pub fn poll_ping(&mut self, now: EpochMs) -> Vec<PingAction> {
        let actions = self.ping.poll(now);
        self.stats.pings_sent += actions.iter().filter(|a| matches!(a, PingAction::Send(_))).count() as u64;
        actions
    }

    /// Rolls up every window whose boundary is at or before `now`.
    pub fn poll_rollups(&mut self, now: EpochMs) -> Result<Vec<RolledWindow>, AgentError> {
        let mut out = Vec::new();
        while self.next_boundary <= now {
            let window = RollupWindow::ending_at(self.next_boundary, self.config.rollup_period_ms());
            out.push(self.roll_window(window)?);
            self.next_boundary += self.config.rollup_period_ms();
        }
        Ok(out)
    }

    fn roll_window(&mut self, window: RollupWindow) -> Result<RolledWindow, AgentError> {
        let rollup = self.table.rollup(window)?;
        let lot = self.lot_id.clone().unwrap_or_else(|| "unknown".into());
        let envelope = UploadEnvelope::new(&lot, window.start, window.end, rollup.records.clone());

        let csv_path = write_csv(&rollup.records, window.start, &lot, &self.config.csv_dir)
            .or_else(|e| {
                warn!(error = %e, "csv write failed, retrying once");
                write_csv(&rollup.records, window.start, &lot, &self.config.csv_dir)
            })
            .map_err(|e| {
                warn!(error = %e, key = %envelope.idempotency_key, "csv write failed twice, parking envelope");
                self.park(&envelope)
            })
            .ok();

        self.log.append(&LogEntry::flush(window.end, window.start))?;
        self.log.sync()?;
        self.uploader.enqueue(envelope.clone())?;
        Ok(RolledWindow { rollup, csv_path, envelope })
    }

    fn park(&self, envelope: &UploadEnvelope) {
        let dir = self.config.dead_letter_dir();
        let result = fs::create_dir_all(&dir).and_then(|()| {
            let name = format!("{}_{}.json", envelope.lot_id, envelope.window_start);
            fs::write(dir.join(name), serde_json::to_vec_pretty(envelope).expect("envelopes serialize"))
        });
        if let Err(e) = result {
            warn!(error = %e, "could not write dead-letter envelope");
        }
    }

    /// Earliest time at which the ping loop or roll-up scheduler needs a poll.
    pub fn next_wakeup(&self) -> EpochMs {
        self.ping.next_at().map_or(self.next_boundary, |p| p.min(self.next_boundary))
    }
}

#[derive(Debug, Default)]
pub struct Recovered {
    pub table: StateTable,
    pub first_ts: Option<EpochMs>,
    pub last_flush: Option<EpochMs>,
    pub replayed: usize,
    pub skipped: usize,
}

/// Rebuilds the state table from the log. Flush markers reset the
/// accumulators exactly as the live roll-up did, so the result holds the
/// statuses carried across windows plus the activity since the last flush.
/// An unreadable log yields an empty table.
pub fn recover(log_path: &Path) -> Result<Recovered, AgentError> {
    let contents = match read_log(log_path) {
        Ok(c) => c,
        Err(e) => {
            warn!(path = %log_path.display(), error = %e, "event log unreadable, starting empty");
            return Ok(Recovered::default());
        }
    };
    let mut out = Recovered {
        first_ts: contents.entries.first().map(LogEntry::ts),
        skipped: contents.skipped,
        ..Recovered::default()
    };
    for entry in &contents.entries {
        if let Some(window) = log::replay_entry(&mut out.table, entry) {
            out.last_flush = Some(window.end);
        }
        out.replayed += 1;
    }
    Ok(out)
}
