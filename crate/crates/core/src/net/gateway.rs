//! Gateway simulator server. Each connection gets its own
//! [`GatewaySession`]; pushes are paced by a shared clock mapped onto the
//! trace's sim time.

use std::io;
use std::sync::Arc;

use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tracing::{debug, info, warn};

use crate::clock::Clock;
use crate::gateway::{Gateway, GatewaySession};
use crate::model::EpochMs;

use super::send;

/// Accepts sessions forever. Sim time is `clock.now_ms() - start`.
pub async fn serve_gateway(
    listener: TcpListener,
    gateway: Gateway,
    clock: Arc<dyn Clock>,
    start: EpochMs,
) -> io::Result<()> {
    let gateway = Arc::new(gateway);
    loop {
        let (stream, peer) = listener.accept().await?;
        let sim_now = clock.now_ms() - start;
        if gateway.config.faults.is_down(sim_now) {
            debug!(%peer, sim_now, "refusing connection during injected outage");
            drop(stream);
            continue;
        }
        info!(%peer, "gateway session opened");
        let (gateway, clock) = (gateway.clone(), clock.clone());
        tokio::spawn(async move {
            if let Err(e) = session(stream, &gateway, clock.as_ref(), start).await {
                warn!(%peer, error = %e, "gateway session failed");
            }
            info!(%peer, "gateway session closed");
        });
    }
}

async fn session(stream: TcpStream, gw: &Gateway, clock: &dyn Clock, start: EpochMs) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let mut session = GatewaySession::new();
    loop {
        let sim_now = clock.now_ms() - start;
        let next_drop = gw.config.faults.drops().map(|(at, _)| at).filter(|&at| at > sim_now).min();
        let wake = [session.next_due(gw), next_drop].into_iter().flatten().min();
        let sleep = match wake {
            Some(at) => clock.real_duration(at - sim_now) + std::time::Duration::from_millis(1),
            None => std::time::Duration::from_secs(3600),
        };
        tokio::select! {
            line = lines.next_line() => {
                let Some(line) = line? else { return Ok(()) };
                let reply = session.on_line(gw, &line, clock.now_ms() - start);
                for msg in &reply.messages {
                    send(&mut write, msg).await?;
                }
                if reply.close {
                    return Ok(());
                }
            }
            _ = tokio::time::sleep(sleep) => {
                let sim_now = clock.now_ms() - start;
                if gw.config.faults.is_down(sim_now) {
                    info!(sim_now, "dropping session for injected outage");
                    return Ok(());
                }
                for msg in session.due_updates(gw, sim_now) {
                    send(&mut write, &msg).await?;
                }
            }
        }
    }
}
