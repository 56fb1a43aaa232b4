//! Gateway liveness pings.

use crate::model::EpochMs;

/// Consecutive unanswered pings after which the session is declared dead.
pub const MAX_MISSED_PONGS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PingAction {
    Send(u64),
    SessionDead,
}

/// Sends a ping every interval starting one interval after the session opens.
/// A ping counts as missed when the next one falls due without a matching pong.
#[derive(Debug, Clone)]
pub struct PingTracker {
    interval_ms: i64,
    next_at: Option<EpochMs>,
    last_seq: u64,
    outstanding: Option<u64>,
    missed: u32,
}

impl PingTracker {
    pub fn new(interval_ms: i64) -> Self {
        assert!(interval_ms > 0);
        Self { interval_ms, next_at: None, last_seq: 0, outstanding: None, missed: 0 }
    }

    /// Restarts the schedule for a fresh session. Sequence numbers keep
    /// counting up across sessions.
    pub fn start(&mut self, now: EpochMs) {
        self.next_at = Some(now + self.interval_ms);
        self.outstanding = None;
        self.missed = 0;
    }

    pub fn stop(&mut self) {
        self.next_at = None;
        self.outstanding = None;
    }

    pub fn next_at(&self) -> Option<EpochMs> {
        self.next_at
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn poll(&mut self, now: EpochMs) -> Vec<PingAction> {
        let mut actions = Vec::new();
        while let Some(due) = self.next_at.filter(|&t| t <= now) {
            if self.outstanding.take().is_some() {
                self.missed += 1;
                if self.missed >= MAX_MISSED_PONGS {
                    self.stop();
                    actions.push(PingAction::SessionDead);
                    break;
                }
            }
            self.last_seq += 1;
            self.outstanding = Some(self.last_seq);
            self.next_at = Some(due + self.interval_ms);
            actions.push(PingAction::Send(self.last_seq));
        }
        actions
    }

    /// A pong whose seq does not match the outstanding ping is ignored.
    pub fn on_pong(&mut self, seq: u64) {
        if self.outstanding == Some(seq) {
            self.outstanding = None;
            self.missed = 0;
        }
    }
}
