//! Socket driver for [`EdgeAgent`].
//!
//! One loop owns the agent and the gateway connection; a helper task owns the
//! hub connection so a slow ack never stalls event ingestion.

use std::future::Future;
use std::io;
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tracing::{info, warn};

use crate::agent::{AgentConfig, AgentError, AgentStats, Backoff, EdgeAgent, PingAction};
use crate::clock::Clock;
use crate::model::EpochMs;
use crate::wire::{decode_line, WireMessage};

use super::{send, CONNECT_TIMEOUT};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentRunSummary {
    pub stats: AgentStats,
    pub pending_uploads: usize,
}

struct GatewayConn {
    lines: Lines<BufReader<OwnedReadHalf>>,
    write: OwnedWriteHalf,
}

enum HubEvent {
    Reply(WireMessage),
    Failed,
}

enum Wake {
    Shutdown,
    Tick,
    Gateway(io::Result<Option<String>>),
    Hub(Option<HubEvent>),
}

async fn connect(addr: &str) -> io::Result<TcpStream> {
    tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
        .await
        .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "connect timed out"))?
}

async fn next_gateway_line(conn: &mut Option<GatewayConn>) -> io::Result<Option<String>> {
    match conn {
        Some(c) => c.lines.next_line().await,
        None => std::future::pending().await,
    }
}

/// Sends each queued upload over a lazily (re)opened hub connection and
/// reports the reply or the failure.
async fn hub_link(
    addr: String,
    ack_timeout: Duration,
    mut rx: mpsc::Receiver<WireMessage>,
    tx: mpsc::Sender<HubEvent>,
) {
    let mut conn: Option<(Lines<BufReader<OwnedReadHalf>>, OwnedWriteHalf)> = None;
    while let Some(msg) = rx.recv().await {
        let result = async {
            if conn.is_none() {
                let (read, write) = connect(&addr).await?.into_split();
                conn = Some((BufReader::new(read).lines(), write));
            }
            let (lines, write) = conn.as_mut().expect("just connected");
            send(write, &msg).await?;
            let line = tokio::time::timeout(ack_timeout, lines.next_line())
                .await
                .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "no reply from hub"))??
                .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "hub closed the connection"))?;
            decode_line(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
        }
        .await;
        let event = match result {
            Ok(reply) => HubEvent::Reply(reply),
            Err(e) => {
                warn!(error = %e, "upload failed");
                conn = None;
                HubEvent::Failed
            }
        };
        if tx.send(event).await.is_err() {
            return;
        }
    }
}

/// Rolls every window whose boundary is at or before `until`.
fn roll_due(agent: &mut EdgeAgent, until: EpochMs) -> Result<(), AgentError> {
    for rolled in agent.poll_rollups(until)? {
        info!(window_start = rolled.rollup.window.start, bays = rolled.rollup.records.len(), "window rolled up");
    }
    Ok(())
}

/// Runs the agent until `shutdown` resolves.
pub async fn run_agent(
    config: AgentConfig,
    clock: Arc<dyn Clock>,
    shutdown: impl Future<Output = ()>,
) -> Result<AgentRunSummary, AgentError> {
    let mut agent = EdgeAgent::open(config.clone(), clock.now_ms())?;
    let (up_tx, up_rx) = mpsc::channel::<WireMessage>(1);
    let (ev_tx, mut ev_rx) = mpsc::channel::<HubEvent>(1);
    let ack_timeout = clock.real_duration(config.ack_timeout_ms);
    let link = tokio::spawn(hub_link(config.cloud_address.clone(), ack_timeout, up_rx, ev_tx));

    let mut gateway: Option<GatewayConn> = None;
    let mut backoff = Backoff::new(config.reconnect_backoff);
    let mut retry_at: EpochMs = clock.now_ms();
    tokio::pin!(shutdown);

    loop {
        let now = clock.now_ms();
        roll_due(&mut agent, now - 1)?;
        if gateway.is_none() && now >= retry_at {
            match connect(&config.gateway_address).await {
                Ok(stream) => {
                    let (read, mut write) = stream.into_split();
                    let hello = agent.begin_session(now);
                    match send(&mut write, &hello).await {
                        Ok(()) => {
                            info!(addr = %config.gateway_address, "connected to gateway");
                            backoff.reset();
                            gateway = Some(GatewayConn { lines: BufReader::new(read).lines(), write });
                        }
                        Err(e) => {
                            warn!(error = %e, "gateway handshake failed");
                            agent.session_lost(now)?;
                            retry_at = now + backoff.next_delay();
                        }
                    }
                }
                Err(e) => {
                    retry_at = clock.now_ms() + backoff.next_delay();
                    warn!(error = %e, retry_at, "gateway unreachable");
                }
            }
        }

        let now = clock.now_ms();
        roll_due(&mut agent, now - 1)?;
        for action in agent.poll_ping(now) {
            let ok = match (action, gateway.as_mut()) {
                (PingAction::Send(seq), Some(conn)) => send(&mut conn.write, &WireMessage::Ping { seq }).await.is_ok(),
                (PingAction::Send(_), None) => true,
                (PingAction::SessionDead, _) => {
                    warn!("gateway missed three pongs");
                    false
                }
            };
            if !ok && gateway.take().is_some() {
                agent.session_lost(now)?;
                retry_at = now + backoff.next_delay();
            }
        }
        roll_due(&mut agent, now)?;
        if let Some(msg) = agent.uploader_mut().poll(now) {
            if up_tx.send(msg).await.is_err() {
                agent.uploader_mut().send_failed(now);
            }
        }

        let mut deadline = agent.next_wakeup();
        if let Some(d) = agent.uploader().next_deadline() {
            deadline = deadline.min(d);
        }
        if gateway.is_none() {
            deadline = deadline.min(retry_at);
        }
        let sleep = clock.real_duration(deadline - clock.now_ms()) + Duration::from_millis(1);

        let wake = tokio::select! {
            () = &mut shutdown => Wake::Shutdown,
            () = tokio::time::sleep(sleep) => Wake::Tick,
            line = next_gateway_line(&mut gateway) => Wake::Gateway(line),
            ev = ev_rx.recv() => Wake::Hub(ev),
        };
        let now = clock.now_ms();
        // A wake can land past a boundary before the timer fires; roll first so
        // nothing stamped `now` reaches the table ahead of the older window end.
        roll_due(&mut agent, now - 1)?;
        match wake {
            Wake::Shutdown => break,
            Wake::Tick => {}
            Wake::Gateway(Ok(Some(line))) => {
                let result = match decode_line(&line) {
                    Ok(msg) => agent.on_gateway_message(msg, now),
                    Err(e) => Err(AgentError::Protocol(e.to_string())),
                };
                match result {
                    Ok(()) => {}
                    Err(AgentError::Protocol(reason)) => {
                        warn!(%reason, "dropping gateway session");
                        gateway = None;
                        agent.session_lost(now)?;
                        retry_at = now + backoff.next_delay();
                    }
                    Err(e) => return Err(e),
                }
            }
            Wake::Gateway(end) => {
                if let Err(e) = end {
                    warn!(error = %e, "gateway read failed");
                }
                info!("gateway session ended");
                gateway = None;
                agent.session_lost(now)?;
                retry_at = now + backoff.next_delay();
            }
            Wake::Hub(Some(HubEvent::Reply(reply))) => {
                if let Some(key) = agent.uploader_mut().on_reply(&reply, now)? {
                    info!(%key, "upload acknowledged");
                }
            }
            Wake::Hub(Some(HubEvent::Failed)) => agent.uploader_mut().send_failed(now),
            Wake::Hub(None) => return Err(AgentError::Io(io::Error::other("upload task stopped"))),
        }
    }
    link.abort();
    Ok(AgentRunSummary { stats: agent.stats().clone(), pending_uploads: agent.uploader().pending() })
}
