//! End-to-end harness: scenario files, deterministic simulation under a
//! virtual clock, log replay, verification and reports.

pub mod layout;
pub mod replay;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod traffic;
pub mod verify;

use thiserror::Error;

use crate::agent::AgentError;
use crate::hub::HubError;

pub use self::layout::{RunManifest, RunPaths};
pub use self::replay::{replay_log, write_replay, ReplayOptions, ReplayOutcome};
pub use self::report::{export_report, ReportFormat};
pub use self::scenario::{ScenarioConfig, ScenarioError};
pub use self::sim::{run_sim, RunOutcome, SimMetrics, Simulation};
pub use self::traffic::{traffic_report, TrafficLedger};
pub use self::verify::{verify, VerifyReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("agent: {0}")]
    Agent(#[from] AgentError),
    #[error("hub: {0}")]
    Hub(#[from] HubError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}
