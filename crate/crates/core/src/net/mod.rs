//! TCP transport for multi-process deployments: the gateway simulator and hub
//! servers, and the agent runtime that drives an [`crate::agent::EdgeAgent`]
//! over real sockets.

pub mod agent;
pub mod gateway;
pub mod hub;

use std::time::Duration;

use tokio::io::{AsyncWrite, AsyncWriteExt};

use crate::wire::{encode_line, WireMessage};

pub use self::agent::{run_agent, AgentRunSummary};
pub use self::gateway::serve_gateway;
pub use self::hub::serve_hub;

/// Upper bound for a single TCP connect attempt.
pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

async fn send<W: AsyncWrite + Unpin>(w: &mut W, msg: &WireMessage) -> std::io::Result<()> {
    w.write_all(encode_line(msg).as_bytes()).await?;
    w.flush().await
}
