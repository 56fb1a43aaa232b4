//! Deterministic single-threaded end-to-end run under a virtual clock.
//!
//! The gateway session, the edge agent and the hub all live in one process
//! and exchange encoded wire lines, so a run exercises the same code paths
//! as the socket deployment while finishing a simulated week in seconds.
//! Time only moves when every component is idle until its next deadline.

use std::collections::VecDeque;
use std::fs;

use crate::agent::{AgentConfig, AgentStats, Backoff, ClockMode, EdgeAgent, PingAction};
use crate::clock::{utc_midnight, Clock, VirtualClock};
use crate::gateway::{Gateway, GatewaySession, SessionReply};
use crate::hub::HubStore;
use crate::model::EpochMs;
use crate::wire::{decode_line, encode_line, WireMessage};

use super::layout::{write_trace, RunManifest, RunPaths};
use super::scenario::ScenarioConfig;
use super::{report, traffic, HarnessError};

/// Upper bound on upload retries after the run ends.
const MAX_DRAIN_STEPS: usize = 10_000;

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct SimMetrics {
    pub update_messages: u64,
    pub update_bytes: u64,
    /// Sequence numbers of every ping the agent sent, in order.
    pub ping_seqs: Vec<u64>,
    pub connects: u64,
    pub refused_connects: u64,
    pub crashes: u64,
    pub upload_attempts: u64,
    pub uploads_refused: u64,
    pub acks_lost: u64,
    pub windows_rolled: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub paths: RunPaths,
    pub manifest: RunManifest,
    pub metrics: SimMetrics,
    pub agent_stats: AgentStats,
    pub ledger: traffic::TrafficLedger,
    pub pending_uploads: usize,
}

pub struct Simulation {
    scenario: ScenarioConfig,
    paths: RunPaths,
    manifest: RunManifest,
    clock: VirtualClock,
    gateway: Gateway,
    session: Option<GatewaySession>,
    agent_config: AgentConfig,
    agent: EdgeAgent,
    hub: HubStore,
    reconnect: Backoff,
    retry_at: Option<EpochMs>,
    crashes: VecDeque<EpochMs>,
    drops: VecDeque<EpochMs>,
    acks_to_lose: u32,
    next_t: EpochMs,
    metrics: SimMetrics,
    agent_stats: AgentStats,
}

fn roundtrip(msg: &WireMessage) -> Result<(WireMessage, usize), HarnessError> {
    let line = encode_line(msg);
    let decoded = decode_line(&line).map_err(|e| HarnessError::Invalid(format!("wire round trip failed: {e}")))?;
    Ok((decoded, line.len()))
}

impl Simulation {
    /// Prepares `run_dir` (which must not already hold a run) and connects
    /// nothing yet; the first step happens at the scenario start.
    pub fn new(scenario: ScenarioConfig, run_dir: impl Into<std::path::PathBuf>) -> Result<Self, HarnessError> {
        let paths = RunPaths::new(run_dir);
        if paths.event_log().exists() || paths.manifest().exists() {
            return Err(HarnessError::Invalid(format!("{} already holds a run", paths.root.display())));
        }
        paths.create()?;
        fs::write(paths.scenario(), &scenario.source)?;
        let trace = scenario.trace()?;
        write_trace(&trace, &paths.trace())?;

        let start = scenario.start_ms;
        let mut agent_config = AgentConfig::new(paths.event_log(), paths.csv_dir());
        agent_config.poll_interval_sec = scenario.poll_interval_sec;
        agent_config.rollup_period_sec = scenario.rollup_period_sec;
        agent_config.clock_mode = ClockMode::Virtual;
        agent_config.reconnect_backoff = scenario.backoff;
        agent_config.ack_timeout_ms = scenario.ack_timeout_ms;
        agent_config.window_epoch = Some(utc_midnight(start));
        agent_config.client_name = "harness-agent".into();

        let manifest = RunManifest {
            name: scenario.name.clone(),
            lot_id: scenario.gateway.lot_id.clone(),
            bay_count: scenario.gateway.bay_count,
            start_ms: start,
            end_ms: scenario.end_ms(),
            window_epoch: utc_midnight(start),
            rollup_period_ms: agent_config.rollup_period_ms(),
        };
        manifest.write(&paths.manifest())?;

        let agent = EdgeAgent::open(agent_config.clone(), start)?;
        let hub = HubStore::open(paths.hub_dir())?;
        let crashes = scenario.crash_at.iter().map(|c| start + c).collect::<Vec<_>>();
        let mut drops: Vec<EpochMs> = scenario.gateway.faults.drops().map(|(at, _)| start + at).collect();
        drops.sort_unstable();
        let mut crashes_sorted = crashes;
        crashes_sorted.sort_unstable();

        Ok(Self {
            clock: VirtualClock::new(start),
            gateway: Gateway::new(scenario.gateway.clone(), trace),
            session: None,
            agent_config,
            agent,
            hub,
            reconnect: Backoff::new(scenario.backoff),
            retry_at: Some(start),
            crashes: crashes_sorted.into(),
            drops: drops.into(),
            acks_to_lose: scenario.lose_acks,
            next_t: start,
            metrics: SimMetrics::default(),
            agent_stats: AgentStats::default(),
            manifest,
            paths,
            scenario,
        })
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn agent(&self) -> &EdgeAgent {
        &self.agent
    }

    pub fn hub(&self) -> &HubStore {
        &self.hub
    }

    pub fn metrics(&self) -> &SimMetrics {
        &self.metrics
    }

    pub fn paths(&self) -> &RunPaths {
        &self.paths
    }

    fn sim(&self, t: EpochMs) -> i64 {
        t - self.scenario.start_ms
    }

    /// Processes every step due at or before `until`, then parks the clock at
    /// `until`.
    pub fn run_until(&mut self, until: EpochMs) -> Result<(), HarnessError> {
        while self.next_t <= until {
            let t = self.next_t;
            self.clock.advance_to(t);
            self.step(t)?;
            self.next_t = self.next_event_after(t);
        }
        if until > self.clock.now_ms() {
            self.clock.advance_to(until);
        }
        Ok(())
    }

    /// Runs to the scenario end, drains pending uploads and writes the
    /// traffic ledger and summary.
    pub fn finish(mut self) -> Result<RunOutcome, HarnessError> {
        self.run_until(self.scenario.end_ms())?;
        for _ in 0..MAX_DRAIN_STEPS {
            let Some(deadline) = self.agent.uploader().next_deadline() else { break };
            let t = deadline.max(self.clock.now_ms());
            self.clock.advance_to(t);
            self.uploads(t)?;
        }
        let pending_uploads = self.agent.uploader().pending();
        self.collect_agent_stats();
        let ledger = traffic::traffic_report(&self.paths.root)?;
        ledger.write(&self.paths.ledger())?;
        let summary = report::summary_markdown(&self.manifest, &self.hub, &ledger, &self.metrics);
        fs::write(self.paths.summary(), summary)?;
        Ok(RunOutcome {
            paths: self.paths,
            manifest: self.manifest,
            metrics: self.metrics,
            agent_stats: self.agent_stats,
            ledger,
            pending_uploads,
        })
    }

    fn collect_agent_stats(&mut self) {
        let s = self.agent.stats();
        self.agent_stats.warnings += s.warnings;
        self.agent_stats.rejected += s.rejected;
        self.agent_stats.pings_sent += s.pings_sent;
        self.agent_stats.sessions += s.sessions;
        self.agent_stats.disconnects += s.disconnects;
        self.agent_stats.updates += s.updates;
    }

    fn next_event_after(&self, t: EpochMs) -> EpochMs {
        let start = self.scenario.start_ms;
        let candidates = [
            self.session.as_ref().and_then(|s| s.next_due(&self.gateway)).map(|sim| start + sim),
            Some(self.agent.next_wakeup()),
            self.retry_at.filter(|_| self.session.is_none()),
            self.agent.uploader().next_deadline(),
            self.crashes.front().copied(),
            self.drops.front().copied(),
        ];
        let next = candidates.into_iter().flatten().min().unwrap_or(EpochMs::MAX);
        next.max(t + 1)
    }

    fn step(&mut self, t: EpochMs) -> Result<(), HarnessError> {
        while self.drops.front().is_some_and(|&d| d <= t) {
            self.drops.pop_front();
            if self.session.is_some() {
                self.disconnect(t)?;
            }
        }
        while self.crashes.front().is_some_and(|&c| c <= t) {
            self.crashes.pop_front();
            self.crash(t)?;
        }
        if self.session.is_none() && self.retry_at.is_some_and(|r| r <= t) {
            self.connect(t)?;
        }
        let sim = self.sim(t);
        let updates = match self.session.as_mut() {
            Some(session) => session.due_updates(&self.gateway, sim),
            None => Vec::new(),
        };
        for msg in updates {
            if self.session.is_none() {
                break;
            }
            let (msg, bytes) = roundtrip(&msg)?;
            self.metrics.update_messages += 1;
            self.metrics.update_bytes += bytes as u64;
            self.deliver_to_agent(msg, t)?;
        }
        for action in self.agent.poll_ping(t) {
            match action {
                PingAction::Send(seq) => {
                    self.metrics.ping_seqs.push(seq);
                    let line = encode_line(&WireMessage::Ping { seq });
                    let Some(session) = self.session.as_mut() else { continue };
                    let reply = session.on_line(&self.gateway, &line, sim);
                    self.deliver(reply, t)?;
                }
                PingAction::SessionDead => self.disconnect(t)?,
            }
        }
        let rolled = self.agent.poll_rollups(t)?;
        self.metrics.windows_rolled += rolled.len() as u64;
        self.uploads(t)
    }

    fn connect(&mut self, t: EpochMs) -> Result<(), HarnessError> {
        if self.gateway.config.faults.is_down(self.sim(t)) {
            self.metrics.refused_connects += 1;
            self.retry_at = Some(t + self.reconnect.next_delay());
            return Ok(());
        }
        self.metrics.connects += 1;
        self.reconnect.reset();
        self.retry_at = None;
        let hello = encode_line(&self.agent.begin_session(t));
        let mut session = GatewaySession::new();
        let reply = session.on_line(&self.gateway, &hello, self.sim(t));
        self.session = Some(session);
        self.deliver(reply, t)
    }

    fn disconnect(&mut self, t: EpochMs) -> Result<(), HarnessError> {
        self.session = None;
        self.agent.session_lost(t)?;
        self.retry_at = Some(t + self.reconnect.next_delay());
        Ok(())
    }

    /// Kills the agent without a clean shutdown and starts a fresh one on the
    /// same state directory, which reconnects immediately.
    fn crash(&mut self, t: EpochMs) -> Result<(), HarnessError> {
        self.metrics.crashes += 1;
        self.collect_agent_stats();
        self.session = None;
        self.agent = EdgeAgent::open(self.agent_config.clone(), t)?;
        self.reconnect.reset();
        self.retry_at = Some(t);
        Ok(())
    }

    fn deliver(&mut self, reply: SessionReply, t: EpochMs) -> Result<(), HarnessError> {
        for msg in reply.messages {
            if self.session.is_none() {
                break;
            }
            let (msg, _) = roundtrip(&msg)?;
            self.deliver_to_agent(msg, t)?;
        }
        if reply.close && self.session.is_some() {
            self.disconnect(t)?;
        }
        Ok(())
    }

    fn deliver_to_agent(&mut self, msg: WireMessage, t: EpochMs) -> Result<(), HarnessError> {
        match self.agent.on_gateway_message(msg, t) {
            Ok(()) => Ok(()),
            Err(crate::agent::AgentError::Protocol(reason)) => {
                tracing::warn!(%reason, "dropping gateway session");
                self.disconnect(t)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn uploads(&mut self, t: EpochMs) -> Result<(), HarnessError> {
        while let Some(msg) = self.agent.uploader_mut().poll(t) {
            self.metrics.upload_attempts += 1;
            if self.scenario.hub_is_down(self.sim(t)) {
                self.metrics.uploads_refused += 1;
                self.agent.uploader_mut().send_failed(t);
                continue;
            }
            let (msg, _) = roundtrip(&msg)?;
            let (reply, _) = roundtrip(&self.hub.handle(msg, t))?;
            if self.acks_to_lose > 0 && matches!(reply, WireMessage::Ack { .. }) {
                self.acks_to_lose -= 1;
                self.metrics.acks_lost += 1;
                continue;
            }
            self.agent.uploader_mut().on_reply(&reply, t)?;
        }
        Ok(())
    }
}

/// Runs a scenario end to end into `run_dir`.
pub fn run_sim(scenario: ScenarioConfig, run_dir: impl Into<std::path::PathBuf>) -> Result<RunOutcome, HarnessError> {
    Simulation::new(scenario, run_dir)?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BayId, DAY_MS};

    fn scenario(extra: &str) -> ScenarioConfig {
        ScenarioConfig::parse(&format!("lot-id = \"A\"\nbays = 6\nseed = 5\n{extra}")).unwrap()
    }

    #[test]
    fn one_day_produces_one_csv_and_one_stored_window() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_sim(scenario(""), dir.path().join("run")).unwrap();
        assert_eq!(out.metrics.windows_rolled, 1);
        assert_eq!(out.pending_uploads, 0);
        let hub = HubStore::open(out.paths.hub_dir()).unwrap();
        assert_eq!(hub.len(), 1);
        assert_eq!(fs::read_dir(out.paths.csv_dir()).unwrap().count(), 1);
        assert!(out.paths.summary().exists() && out.paths.ledger().exists());
    }

    #[test]
    fn refuses_to_reuse_a_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        run_sim(scenario(""), dir.path()).unwrap();
        assert!(Simulation::new(scenario(""), dir.path()).is_err());
    }

    #[test]
    fn pings_every_interval_with_increasing_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let s = scenario("");
        let start = s.start_ms;
        let mut sim = Simulation::new(s, dir.path()).unwrap();
        sim.run_until(start + 10 * 60_000).unwrap();
        assert_eq!(sim.metrics().ping_seqs, (1..=10).collect::<Vec<u64>>());
    }

    #[test]
    fn drop_fault_disconnects_and_reconnects() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_sim(scenario("inject = [\"drop:3600:120\"]"), dir.path()).unwrap();
        assert_eq!(out.agent_stats.disconnects, 1);
        assert_eq!(out.metrics.connects, 2);
        assert!(out.metrics.refused_connects > 0);
    }

    #[test]
    fn hub_outage_and_lost_ack_still_deliver_once() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_sim(scenario("days = 2\nhub-down = [\"86400:60\"]\nlose-acks = 1"), dir.path()).unwrap();
        assert_eq!(out.pending_uploads, 0);
        assert!(out.metrics.uploads_refused > 0);
        assert_eq!(out.metrics.acks_lost, 1);
        let hub = HubStore::open(out.paths.hub_dir()).unwrap();
        assert_eq!(hub.len(), 2);
        let lines = fs::read_to_string(out.paths.hub_dir().join("A.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 2, "resends are deduplicated");
    }

    #[test]
    fn scripted_overnight_interval_splits_at_midnight() {
        let dir = tempfile::tempdir().unwrap();
        let out =
            run_sim(scenario("days = 2\n[script]\nevents = [\"72000 3 occupied\", \"115200 3 free\"]"), dir.path())
                .unwrap();
        let hub = HubStore::open(out.paths.hub_dir()).unwrap();
        let start = out.manifest.start_ms;
        let day = |d: i64| hub.query_daily("A", start + d * DAY_MS).unwrap().to_vec();
        let bay3 = |d: i64| day(d).into_iter().find(|r| r.bay_id == BayId(3)).unwrap().occupation_time_sec;
        assert_eq!((bay3(0), bay3(1)), (14_400, 28_800));
    }
}
