//! Edge aggregation of parking-bay occupancy.
//!
//! The pieces, bottom up:
//!
//! - [`model`]: the per-bay occupancy state machine and roll-up arithmetic.
//! - [`oracle`]: an independent brute-force reference for the accounting.
//! - [`wire`]: the newline-delimited JSON protocol.
//! - [`gateway`]: a seeded sensor/gateway simulator.
//! - [`agent`]: the edge agent (write-ahead log, roll-ups, CSV, uploads).
//! - [`hub`]: the cloud-side deduplicating store and reports.
//! - [`harness`]: deterministic end-to-end runs under a virtual clock,
//!   verification, replay and traffic accounting.
//! - [`net`]: TCP servers and the agent runtime for multi-process use.

pub mod agent;
pub mod clock;
pub mod gateway;
pub mod harness;
pub mod hub;
pub mod model;
pub mod net;
pub mod oracle;
pub mod wire;

pub use model::{
    occupation_rate, BayId, BayState, BayStatus, EpochMs, EventKind, ModelError, OccupancyEvent, OccupationRate,
    Rollup, RollupRecord, RollupWindow, StateTable, DAY_MS,
};
pub use oracle::oracle_occupancy;
