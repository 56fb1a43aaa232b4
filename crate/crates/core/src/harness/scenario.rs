//! Scenario files: flat TOML whose keys mirror the component CLI flags.
//!
//! ```toml
//! name = "calibrated-week"
//! seed = 2018
//! bays = 22
//! lot-id = "psu-a"
//! mean-occupied-min = 45.0
//! mean-free-min = 99.0
//! days = 7
//! start = "2018-11-18"
//! inject = ["drop:3600:120"]
//!
//! [script]            # optional; replaces the random sensor model
//! initial = "free"
//! events = ["72000 12 occupied", "115200 12 free"]
//! ```

use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::Deserialize;
use thiserror::Error;

use crate::agent::BackoffPolicy;
use crate::gateway::{Fault, FaultPlan, GatewayConfig, GatewayError, SensorModel, Trace, DEFAULT_BAY_COUNT};
use crate::model::{BayStatus, EpochMs, DAY_MS};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct ScenarioFile {
    name: String,
    seed: u64,
    bays: u32,
    lot_id: String,
    mean_occupied_min: f64,
    mean_free_min: f64,
    days: u32,
    start: String,
    poll_interval_sec: u64,
    rollup_period_sec: u64,
    inject: Vec<String>,
    crash_at_sec: Vec<i64>,
    hub_down: Vec<String>,
    lose_acks: u32,
    backoff_initial_ms: i64,
    backoff_multiplier: f64,
    backoff_cap_ms: i64,
    ack_timeout_ms: i64,
    script: Option<ScriptFile>,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        let calibrated = SensorModel::calibrated(1);
        let backoff = BackoffPolicy::default();
        Self {
            name: "scenario".into(),
            seed: 1,
            bays: DEFAULT_BAY_COUNT,
            lot_id: "lot-1".into(),
            mean_occupied_min: calibrated.mean_occupied_min,
            mean_free_min: calibrated.mean_free_min,
            days: 1,
            start: "2018-11-18".into(),
            poll_interval_sec: 60,
            rollup_period_sec: 86_400,
            inject: Vec::new(),
            crash_at_sec: Vec::new(),
            hub_down: Vec::new(),
            lose_acks: 0,
            backoff_initial_ms: backoff.initial_ms,
            backoff_multiplier: backoff.multiplier,
            backoff_cap_ms: backoff.cap_ms,
            ack_timeout_ms: 10_000,
            script: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ScriptFile {
    #[serde(default = "default_initial")]
    initial: BayStatus,
    #[serde(default)]
    events: Vec<String>,
}

fn default_initial() -> BayStatus {
    BayStatus::Free
}

/// A hand-written trace: all bays start in `initial`, then `changes` apply as
/// `(sim_ms, bay, status)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub initial: BayStatus,
    pub changes: Vec<(i64, u32, BayStatus)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub gateway: GatewayConfig,
    pub days: u32,
    pub start_ms: EpochMs,
    pub poll_interval_sec: u64,
    pub rollup_period_sec: u64,
    pub backoff: BackoffPolicy,
    pub ack_timeout_ms: i64,
    pub script: Option<Script>,
    /// Sim times (ms) at which the agent process is killed and restarted.
    pub crash_at: Vec<i64>,
    /// `(sim_ms, duration_ms)` spans during which the hub refuses uploads.
    pub hub_down: Vec<(i64, i64)>,
    /// Number of hub acks dropped on the way back to the agent.
    pub lose_acks: u32,
    pub source: String,
}

pub fn parse_timestamp(s: &str) -> Result<EpochMs, ScenarioError> {
    if let Ok(ms) = s.parse::<i64>() {
        return Ok(ms);
    }
    if let Ok(date) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp_millis());
    }
    DateTime::parse_from_rfc3339(s)
        .map(|d| d.timestamp_millis())
        .map_err(|_| invalid(format!("start `{s}` is neither epoch ms, YYYY-MM-DD nor RFC 3339")))
}

fn parse_span(s: &str) -> Result<(i64, i64), ScenarioError> {
    let bad = || invalid(format!("hub-down entry `{s}` must be `<atSec>:<durationSec>`"));
    let (at, dur) = s.split_once(':').ok_or_else(bad)?;
    let at: i64 = at.trim().parse().map_err(|_| bad())?;
    let dur: i64 = dur.trim().parse().map_err(|_| bad())?;
    if at < 0 || dur <= 0 {
        return Err(bad());
    }
    Ok((at * 1000, dur * 1000))
}

fn parse_change(s: &str) -> Result<(i64, u32, BayStatus), ScenarioError> {
    let bad = || invalid(format!("script event `{s}` must be `<sec> <bayId> occupied|free`"));
    let parts: Vec<&str> = s.split_whitespace().collect();
    let [sec, bay, status] = parts.as_slice() else {
        return Err(bad());
    };
    let sec: i64 = sec.parse().map_err(|_| bad())?;
    let bay: u32 = bay.parse().map_err(|_| bad())?;
    let status: BayStatus = status.parse().map_err(|_| bad())?;
    if status == BayStatus::Unknown {
        return Err(bad());
    }
    Ok((sec * 1000, bay, status))
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let f: ScenarioFile = toml::from_str(text)?;
        if f.days == 0 {
            return Err(invalid("days must be at least 1"));
        }
        if f.lot_id.is_empty() {
            return Err(invalid("lot-id must not be empty"));
        }
        if f.poll_interval_sec == 0 || f.rollup_period_sec < f.poll_interval_sec {
            return Err(invalid("need 1 <= poll-interval-sec <= rollup-period-sec"));
        }
        if f.backoff_initial_ms <= 0 || f.backoff_cap_ms < f.backoff_initial_ms || f.backoff_multiplier < 1.0 {
            return Err(invalid("backoff needs initial > 0, cap >= initial and multiplier >= 1"));
        }
        if f.ack_timeout_ms <= 0 {
            return Err(invalid("ack-timeout-ms must be positive"));
        }
        let model =
            SensorModel { mean_occupied_min: f.mean_occupied_min, mean_free_min: f.mean_free_min, seed: f.seed };
        model.validate()?;
        let mut gateway = GatewayConfig::new(f.lot_id, f.bays, model);
        gateway.faults = FaultPlan { faults: f.inject.iter().map(|s| s.parse::<Fault>()).collect::<Result<_, _>>()? };

        let duration = i64::from(f.days) * DAY_MS;
        let crash_at: Vec<i64> = f.crash_at_sec.iter().map(|s| s * 1000).collect();
        if let Some(bad) = crash_at.iter().find(|&&t| t <= 0 || t >= duration) {
            return Err(invalid(format!("crash-at-sec {} outside the run", bad / 1000)));
        }
        let script = f
            .script
            .map(|s| {
                Ok::<_, ScenarioError>(Script {
                    initial: s.initial,
                    changes: s.events.iter().map(|e| parse_change(e)).collect::<Result<_, _>>()?,
                })
            })
            .transpose()?;

        let scenario = Self {
            name: f.name,
            gateway,
            days: f.days,
            start_ms: parse_timestamp(&f.start)?,
            poll_interval_sec: f.poll_interval_sec,
            rollup_period_sec: f.rollup_period_sec,
            backoff: BackoffPolicy {
                initial_ms: f.backoff_initial_ms,
                multiplier: f.backoff_multiplier,
                cap_ms: f.backoff_cap_ms,
            },
            ack_timeout_ms: f.ack_timeout_ms,
            script,
            crash_at,
            hub_down: f.hub_down.iter().map(|s| parse_span(s)).collect::<Result<_, _>>()?,
            lose_acks: f.lose_acks,
            source: text.to_owned(),
        };
        scenario.trace()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn duration_ms(&self) -> i64 {
        i64::from(self.days) * DAY_MS
    }

    pub fn end_ms(&self) -> EpochMs {
        self.start_ms + self.duration_ms()
    }

    /// The ground-truth trace this scenario runs against.
    pub fn trace(&self) -> Result<Trace, ScenarioError> {
        Ok(match &self.script {
            Some(script) => {
                Trace::scripted(self.gateway.bay_count, script.initial, &script.changes, self.duration_ms())?
            }
            None => crate::gateway::generate_trace(&self.gateway, self.duration_ms())?,
        })
    }

    pub fn hub_is_down(&self, sim_ts: i64) -> bool {
        self.hub_down.iter().any(|&(at, dur)| sim_ts >= at && sim_ts < at + dur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let s = ScenarioConfig::parse("").unwrap();
        assert_eq!(s.gateway.bay_count, 22);
        assert_eq!(s.start_ms, 1_542_499_200_000);
        assert_eq!(s.poll_interval_sec, 60);
        assert_eq!(s.rollup_period_sec, 86_400);
        assert!(s.gateway.faults.faults.is_empty());
    }

    #[test]
    fn full_file() {
        let s = ScenarioConfig::parse(
            r#"
            name = "overnight"
            lot-id = "psu-a"
            days = 2
            start = "2018-11-20T00:00:00Z"
            inject = ["drop:3600:120", "duplicate:5"]
            crash-at-sec = [40000]
            hub-down = ["86400:30"]
            lose-acks = 1
            [script]
            initial = "free"
            events = ["72000 12 occupied", "115200 12 free"]
            "#,
        )
        .unwrap();
        assert_eq!(s.name, "overnight");
        assert_eq!(s.gateway.faults.faults.len(), 2);
        assert_eq!(s.crash_at, vec![40_000_000]);
        assert_eq!(s.hub_down, vec![(86_400_000, 30_000)]);
        assert!(s.hub_is_down(86_400_000) && !s.hub_is_down(86_430_000));
        let script = s.script.as_ref().unwrap();
        assert_eq!(script.changes[0], (72_000_000, 12, BayStatus::Occupied));
        assert_eq!(s.trace().unwrap().change_count(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "days = 0",
            "bogus-key = 1",
            "inject = [\"explode\"]",
            "mean-free-min = -1.0",
            "start = \"yesterday\"",
            "crash-at-sec = [999999]",
            "hub-down = [\"5\"]",
            "[script]\nevents = [\"10 99 occupied\"]",
            "[script]\nevents = [\"10 1 free\"]",
        ] {
            assert!(ScenarioConfig::parse(text).is_err(), "{text}");
        }
    }
}
