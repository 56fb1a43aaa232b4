//! Newline-delimited JSON protocol shared by the gateway, the edge agent and
//! the cloud hub. One object per line, discriminated by `"type"`.

use std::io;

use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;
use thiserror::Error;

use crate::agent::UploadEnvelope;
use crate::hub::WeeklyReport;
use crate::model::{BayId, BayStatus, EpochMs, RollupRecord};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayReport {
    pub id: BayId,
    pub status: BayStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LotBays {
    pub lot_id: String,
    pub bays: Vec<BayReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum WireMessage {
    Hello {
        client: String,
        proto: u32,
    },
    Bays {
        data: Vec<LotBays>,
    },
    #[serde(rename_all = "camelCase")]
    BaysUpdate {
        lot_id: String,
        bay: BayReport,
    },
    Ping {
        seq: u64,
    },
    Pong {
        seq: u64,
    },
    Error {
        reason: String,
    },
    Rollup(UploadEnvelope),
    Ack {
        key: String,
    },
    #[serde(rename_all = "camelCase")]
    QueryDaily {
        lot_id: String,
        window_start: EpochMs,
    },
    Daily {
        records: Vec<RollupRecord>,
    },
    NotFound,
    #[serde(rename_all = "camelCase")]
    QueryWeekly {
        lot_id: String,
        week_start: EpochMs,
    },
    Weekly(WeeklyReport),
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "hello",
            WireMessage::Bays { .. } => "bays",
            WireMessage::BaysUpdate { .. } => "baysUpdate",
            WireMessage::Ping { .. } => "ping",
            WireMessage::Pong { .. } => "pong",
            WireMessage::Error { .. } => "error",
            WireMessage::Rollup(_) => "rollup",
            WireMessage::Ack { .. } => "ack",
            WireMessage::QueryDaily { .. } => "queryDaily",
            WireMessage::Daily { .. } => "daily",
            WireMessage::NotFound => "notFound",
            WireMessage::QueryWeekly { .. } => "queryWeekly",
            WireMessage::Weekly(_) => "weekly",
        }
    }

    pub fn error(reason: impl Into<String>) -> Self {
        WireMessage::Error { reason: reason.into() }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("line is not valid UTF-8")]
    NotUtf8,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Serializes a message as one line, terminated by `\n`.
///
/// Roll-up uploads are written with fixed-width numbers (see
/// [`FixedWidthNumbers`]) so their size depends on the bay count alone.
pub fn encode_line(msg: &WireMessage) -> String {
    let mut buf = Vec::with_capacity(128);
    let result = match msg {
        WireMessage::Rollup(_) => {
            let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedWidthNumbers);
            msg.serialize(&mut ser)
        }
        _ => serde_json::to_writer(&mut buf, msg),
    };
    result.expect("wire messages always serialize");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

pub fn decode_line(line: &str) -> Result<WireMessage, WireError> {
    Ok(serde_json::from_str(line.trim_end_matches(['\n', '\r']))?)
}

pub fn decode_bytes(line: &[u8]) -> Result<WireMessage, WireError> {
    decode_line(std::str::from_utf8(line).map_err(|_| WireError::NotUtf8)?)
}

/// JSON formatter that left-pads integers with spaces to the width of their
/// type's widest value and writes floats with four decimals. The output is
/// ordinary JSON; the padding is insignificant whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedWidthNumbers;

fn padded<W: ?Sized + io::Write>(writer: &mut W, width: usize, value: impl std::fmt::Display) -> io::Result<()> {
    write!(writer, "{value:>width$}")
}

impl Formatter for FixedWidthNumbers {
    fn write_u8<W: ?Sized + io::Write>(&mut self, w: &mut W, v: u8) -> io::Result<()> {
        padded(w, 3, v)
    }
    fn write_u16<W: ?Sized + io::Write>(&mut self, w: &mut W, v: u16) -> io::Result<()> {
        padded(w, 5, v)
    }
    fn write_u32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: u32) -> io::Result<()> {
        padded(w, 10, v)
    }
    fn write_u64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: u64) -> io::Result<()> {
        padded(w, 20, v)
    }
    fn write_i32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: i32) -> io::Result<()> {
        padded(w, 11, v)
    }
    fn write_i64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: i64) -> io::Result<()> {
        padded(w, 20, v)
    }
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        padded(w, 12, format_args!("{v:.4}"))
    }
}
