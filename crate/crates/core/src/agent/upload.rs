//! At-least-once delivery of roll-up envelopes to the cloud hub.
//!
//! Envelopes wait in a durable outbox directory until the hub acknowledges
//! their idempotency key, so a crash between roll-up and ack only causes a
//! resend, which the hub deduplicates.

use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{EpochMs, RollupRecord};
use crate::wire::WireMessage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UploadEnvelope {
    pub lot_id: String,
    pub window_start: EpochMs,
    pub window_end: EpochMs,
    pub records: Vec<RollupRecord>,
    pub idempotency_key: String,
}

impl UploadEnvelope {
    pub fn new(lot_id: &str, window_start: EpochMs, window_end: EpochMs, records: Vec<RollupRecord>) -> Self {
        Self {
            lot_id: lot_id.to_owned(),
            window_start,
            window_end,
            records,
            idempotency_key: Self::key_for(lot_id, window_start),
        }
    }

    pub fn key_for(lot_id: &str, window_start: EpochMs) -> String {
        format!("{lot_id}:{window_start}")
    }

    /// Checks the envelope's internal consistency.
    pub fn validate(&self) -> Result<(), String> {
        if self.lot_id.is_empty() {
            return Err("empty lotId".into());
        }
        if self.window_end <= self.window_start {
            return Err("windowEnd must be after windowStart".into());
        }
        if self.idempotency_key != Self::key_for(&self.lot_id, self.window_start) {
            return Err(format!("idempotencyKey `{}` does not match lot and window", self.idempotency_key));
        }
        if !self.records.windows(2).all(|w| w[0].bay_id < w[1].bay_id) {
            return Err("records not sorted by bayId".into());
        }
        let window_sec = ((self.window_end - self.window_start) / 1000) as u64;
        if let Some(r) = self.records.iter().find(|r| r.occupation_time_sec > window_sec) {
            return Err(format!("bay {} occupied longer than the window", r.bay_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackoffPolicy {
    pub initial_ms: i64,
    pub multiplier: f64,
    pub cap_ms: i64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self { initial_ms: 1_000, multiplier: 2.0, cap_ms: 30_000 }
    }
}

#[derive(Debug, Clone)]
pub struct Backoff {
    policy: BackoffPolicy,
    next: Option<i64>,
}

impl Backoff {
    pub fn new(policy: BackoffPolicy) -> Self {
        Self { policy, next: None }
    }

    /// Delay before the next attempt; grows geometrically up to the cap.
    pub fn next_delay(&mut self) -> i64 {
        let delay = self.next.unwrap_or(self.policy.initial_ms).min(self.policy.cap_ms);
        let grown = (delay as f64 * self.policy.multiplier).round() as i64;
        self.next = Some(grown.clamp(delay, self.policy.cap_ms));
        delay
    }

    pub fn reset(&mut self) {
        self.next = None;
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    key: String,
    sent_at: EpochMs,
}

#[derive(Debug)]
pub struct Uploader {
    outbox: Option<PathBuf>,
    queue: VecDeque<UploadEnvelope>,
    in_flight: Option<InFlight>,
    next_attempt_at: EpochMs,
    backoff: Backoff,
    ack_timeout_ms: i64,
    attempts: u64,
    acked: u64,
}

impl Uploader {
    /// An uploader without a durable outbox; pending envelopes die with it.
    pub fn in_memory(policy: BackoffPolicy, ack_timeout_ms: i64) -> Self {
        Self {
            outbox: None,
            queue: VecDeque::new(),
            in_flight: None,
            next_attempt_at: EpochMs::MIN,
            backoff: Backoff::new(policy),
            ack_timeout_ms,
            attempts: 0,
            acked: 0,
        }
    }

    /// Opens the outbox at `dir`, re-queueing anything left there.
    pub fn with_outbox(dir: &Path, policy: BackoffPolicy, ack_timeout_ms: i64) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut pending = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(&path)?;
                match serde_json::from_str::<UploadEnvelope>(&text) {
                    Ok(env) => pending.push(env),
                    Err(e) => tracing::warn!(path = %path.display(), error = %e, "dropping unreadable outbox entry"),
                }
            }
        }
        pending.sort_by(|a, b| (a.window_start, &a.lot_id).cmp(&(b.window_start, &b.lot_id)));
        let mut up = Self::in_memory(policy, ack_timeout_ms);
        up.outbox = Some(dir.to_owned());
        up.queue = pending.into();
        Ok(up)
    }

    fn outbox_path(&self, key: &str) -> Option<PathBuf> {
        let name: String = key.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
        self.outbox.as_ref().map(|d| d.join(format!("{name}.json")))
    }

    pub fn enqueue(&mut self, envelope: UploadEnvelope) -> io::Result<()> {
        if let Some(path) = self.outbox_path(&envelope.idempotency_key) {
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec(&envelope).expect("envelopes serialize"))?;
            fs::rename(&tmp, &path)?;
        }
        self.queue.push_back(envelope);
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn attempts(&self) -> u64 {
        self.attempts
    }

    pub fn acked(&self) -> u64 {
        self.acked
    }

    /// The next time [`Uploader::poll`] has something to do.
    pub fn next_deadline(&self) -> Option<EpochMs> {
        match &self.in_flight {
            Some(f) => Some(f.sent_at + self.ack_timeout_ms),
            None if !self.queue.is_empty() => Some(self.next_attempt_at),
            None => None,
        }
    }

    /// Returns a `rollup` message when one should be sent now.
    pub fn poll(&mut self, now: EpochMs) -> Option<WireMessage> {
        if let Some(f) = &self.in_flight {
            if now < f.sent_at + self.ack_timeout_ms {
                return None;
            }
            self.in_flight = None;
            self.next_attempt_at = now + self.backoff.next_delay();
        }
        let head = self.queue.front()?;
        if now < self.next_attempt_at {
            return None;
        }
        self.attempts += 1;
        self.in_flight = Some(InFlight { key: head.idempotency_key.clone(), sent_at: now });
        Some(WireMessage::Rollup(head.clone()))
    }

    /// The transport could not deliver the in-flight envelope.
    pub fn send_failed(&mut self, now: EpochMs) {
        if self.in_flight.take().is_some() {
            self.next_attempt_at = now + self.backoff.next_delay();
        }
    }

    /// Handles the hub's reply. Anything but a matching ack counts as a
    /// timeout. Returns the acknowledged key.
    pub fn on_reply(&mut self, reply: &WireMessage, now: EpochMs) -> io::Result<Option<String>> {
        let Some(flight) = self.in_flight.take() else {
            return Ok(None);
        };
        match reply {
            WireMessage::Ack { key } if *key == flight.key => {
                self.queue.pop_front();
                if let Some(path) = self.outbox_path(key) {
                    match fs::remove_file(path) {
                        Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
                        _ => {}
                    }
                }
                self.acked += 1;
                self.backoff.reset();
                self.next_attempt_at = now;
                Ok(Some(flight.key))
            }
            _ => {
                self.next_attempt_at = now + self.backoff.next_delay();
                Ok(None)
            }
        }
    }
}
