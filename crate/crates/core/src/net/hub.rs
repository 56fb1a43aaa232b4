//! Hub server: one request line in, one reply line out.

use std::io;
use std::sync::{Arc, Mutex};

use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tracing::{info, warn};

use crate::clock::Clock;
use crate::hub::HubStore;
use crate::wire::{decode_line, WireMessage};

use super::send;

pub async fn serve_hub(listener: TcpListener, store: Arc<Mutex<HubStore>>, clock: Arc<dyn Clock>) -> io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let (store, clock) = (store.clone(), clock.clone());
        tokio::spawn(async move {
            if let Err(e) = connection(stream, &store, clock.as_ref()).await {
                warn!(%peer, error = %e, "hub connection failed");
            }
        });
    }
}

async fn connection(stream: TcpStream, store: &Mutex<HubStore>, clock: &dyn Clock) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        let reply = match decode_line(&line) {
            Ok(msg) => {
                let mut store = store.lock().unwrap_or_else(|p| p.into_inner());
                let reply = store.handle(msg, clock.now_ms());
                if let WireMessage::Ack { key } = &reply {
                    info!(%key, "roll-up acknowledged");
                }
                reply
            }
            Err(e) => WireMessage::error(e.to_string()),
        };
        send(&mut write, &reply).await?;
    }
    Ok(())
}
