//! Line-oriented on-disk representation.
//!
//! Every log, journal, backup and archive file is a sequence of single-line
//! JSON objects, UTF-8, each terminated by `\n`. A stream record has exactly
//! the keys `seq`, `type`, `v`, `payload`, `meta`, in that order, e.g.
//!
//! ```text
//! {"seq":1,"type":"LicenseCreated","v":1,"payload":{"customerId":"BlackMirror"},"meta":{}}
//! ```
//!
//! Decoding is canonical: a line is accepted only if re-encoding the decoded
//! record yields the same bytes, so nothing on disk is ever silently
//! reinterpreted.

pub mod disk;
pub mod manifest;

use serde::{Deserialize, Serialize};

use crate::error::MalformedRecord;
use crate::event::{Event, EventType, Metadata, Payload, SequencedEvent};

pub use disk::{DiskStorage, Durability, OpenOptions};
pub use manifest::{Manifest, StreamMeta, FORMAT_VERSION};

#[derive(Serialize)]
struct RecordOut<'a> {
    seq: u64,
    #[serde(rename = "type")]
    event_type: &'a EventType,
    v: u32,
    payload: &'a Payload,
    meta: &'a Metadata,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    seq: u64,
    #[serde(rename = "type")]
    event_type: EventType,
    v: u32,
    payload: Payload,
    meta: Metadata,
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    #[serde(rename = "type")]
    event_type: &'a EventType,
    v: u32,
    payload: &'a Payload,
    meta: &'a Metadata,
}

/// An event without a sequence number, as accepted by `append` inputs and
/// the tolerant reader. `meta` may be omitted; `seq` is tolerated and ignored.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn {
    #[serde(default)]
    #[allow(dead_code)]
    seq: Option<u64>,
    #[serde(rename = "type")]
    event_type: EventType,
    v: u32,
    payload: Payload,
    #[serde(default)]
    meta: Metadata,
}

/// Appends the canonical line for `record` (including the trailing `\n`).
pub fn encode_record_into(record: &SequencedEvent, out: &mut Vec<u8>) {
    let e = &record.event;
    let line = RecordOut {
        seq: record.sequence,
        event_type: &e.event_type,
        v: e.schema_version,
        payload: &e.payload,
        meta: &e.metadata,
    };
    serde_json::to_writer(&mut *out, &line).expect("serializing to a Vec cannot fail");
    out.push(b'\n');
}

pub fn encode_record(record: &SequencedEvent) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    encode_record_into(record, &mut out);
    out
}

pub fn encode_records<'a>(records: impl IntoIterator<Item = &'a SequencedEvent>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        encode_record_into(r, &mut out);
    }
    out
}

/// Decodes one record line. A single trailing `\n` is allowed.
pub fn decode_record(bytes: &[u8]) -> Result<SequencedEvent, MalformedRecord> {
    let line = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    decode_line(line, 1, 0)
}

fn decode_line(line: &[u8], line_no: usize, offset: usize) -> Result<SequencedEvent, MalformedRecord> {
    let bad = |reason: String| MalformedRecord {
        line: line_no,
        offset,
        reason,
    };
    if line.contains(&b'\n') {
        return Err(bad("embedded line feed".into()));
    }
    let parsed: RecordIn = serde_json::from_slice(line).map_err(|e| bad(e.to_string()))?;
    let record = SequencedEvent {
        sequence: parsed.seq,
        event: Event {
            event_type: parsed.event_type,
            schema_version: parsed.v,
            payload: parsed.payload,
            metadata: parsed.meta,
        },
    };
    if record.sequence == 0 {
        return Err(bad("sequence must be at least 1".into()));
    }
    record.event.validate().map_err(|e| bad(e.to_string()))?;
    let canonical = encode_record(&record);
    if &canonical[..canonical.len() - 1] != line {
        return Err(bad("record is not in canonical form".into()));
    }
    Ok(record)
}

/// Result of scanning a log buffer under the prefix rule.
#[derive(Debug)]
pub struct LogScan {
    /// Every record decoded before the first bad line.
    pub records: Vec<SequencedEvent>,
    /// Byte length of the valid prefix (ends just after a `\n`).
    pub valid_len: usize,
    /// The first bad line, if any. A final line without `\n` is reported as
    /// a torn write.
    pub error: Option<MalformedRecord>,
    /// True when the only defect is an unterminated final line.
    pub torn_tail: bool,
}

/// Decodes a whole log. Complete lines before the first defect always
/// remain readable.
pub fn scan_log(bytes: &[u8]) -> LogScan {
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 1usize;
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return LogScan {
                records,
                valid_len: offset,
                error: Some(MalformedRecord {
                    line: line_no,
                    offset,
                    reason: "torn write: final line has no terminator".into(),
                }),
                torn_tail: true,
            };
        };
        match decode_line(&rest[..end], line_no, offset) {
            Ok(r) => records.push(r),
            Err(e) => {
                return LogScan {
                    records,
                    valid_len: offset,
                    error: Some(e),
                    torn_tail: false,
                }
            }
        }
        offset += end + 1;
        line_no += 1;
    }
    LogScan {
        records,
        valid_len: offset,
        error: None,
        torn_tail: false,
    }
}

/// Encodes an event without a sequence number.
pub fn encode_envelope(event: &Event) -> Vec<u8> {
    let out = EnvelopeOut {
        event_type: &event.event_type,
        v: event.schema_version,
        payload: &event.payload,
        meta: &event.metadata,
    };
    serde_json::to_vec(&out).expect("serializing to a Vec cannot fail")
}

/// Parses an event envelope (`{"type":..,"v":..,"payload":..}` with optional
/// `meta` and `seq`). Not canonical-checked; this is an input format.
pub fn decode_envelope(bytes: &[u8]) -> Result<Event, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
    let parsed: EnvelopeIn = serde_json::from_str(text.trim()).map_err(|e| e.to_string())?;
    let event = Event {
        event_type: parsed.event_type,
        schema_version: parsed.v,
        payload: parsed.payload,
        metadata: parsed.meta,
    };
    event.validate().map_err(|e| e.to_string())?;
    Ok(event)
}
