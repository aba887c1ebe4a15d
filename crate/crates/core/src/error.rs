use std::io;

use thiserror::Error;

use crate::store::Degree;

/// A line of a log, journal or document that could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed record at line {line} (byte offset {offset}): {reason}")]
pub struct MalformedRecord {
    /// 1-based line number.
    pub line: usize,
    /// Byte offset of the start of the line.
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid {what} `{name}`")]
    InvalidName { what: &'static str, name: String },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("stream `{0}` already exists")]
    DuplicateStream(String),

    #[error("unknown stream `{0}`")]
    UnknownStream(String),

    #[error("concurrency conflict: expected {expected}, got {supplied} on stream `{stream}`")]
    ConcurrencyConflict {
        stream: String,
        /// The sequence number the stream would accept next.
        expected: u64,
        supplied: u64,
    },

    #[error("append requires at least one event")]
    EmptyAppend,

    #[error("immutability policy '{degree}' forbids {operation}{}", reason.as_deref().map(|r| format!(": {r}")).unwrap_or_default())]
    ImmutabilityViolation {
        degree: Degree,
        operation: String,
        reason: Option<String>,
    },

    #[error("position {position} out of range for stream `{stream}` (valid: {valid})")]
    PositionOutOfRange {
        stream: String,
        position: u64,
        valid: String,
    },

    #[error("unknown backup `{0}`")]
    UnknownBackup(String),

    #[error("backup `{backup}` does not belong to stream `{stream}`")]
    BackupMismatch { backup: String, stream: String },

    #[error("store corrupt: {0}")]
    StoreCorrupt(String),

    #[error("unknown store format version {0}")]
    UnknownFormatVersion(u64),

    #[error("store already exists at {0}")]
    StoreExists(String),

    #[error("store is locked by another process ({0})")]
    Locked(String),

    #[error(transparent)]
    Malformed(#[from] MalformedRecord),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl StoreError {
    /// True for errors that mean the on-disk data cannot be trusted.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            StoreError::StoreCorrupt(_) | StoreError::UnknownFormatVersion(_) | StoreError::Malformed(_)
        )
    }
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema document line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid schema: {0}")]
    Invalid(String),

    #[error("stream `{0}` has no stream type assigned")]
    UnassignedStreamType(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("no aggregate handles command type `{0}`")]
    UnknownCommandType(String),

    #[error("unknown query `{0}`")]
    UnknownQuery(String),

    #[error("unknown projector `{0}`")]
    UnknownProjector(String),

    #[error("projection `{projector}` is invalid (mutated streams: {}); rebuild required", streams.join(", "))]
    InvalidProjection {
        projector: String,
        streams: Vec<String>,
    },

    #[error("event {stream}#{sequence} does not conform to its schema: {}", violations.join("; "))]
    NonConformingEvent {
        stream: String,
        sequence: u64,
        violations: Vec<String>,
    },

    #[error("projector `{0}` is not partitioned per stream; only a full rebuild is possible")]
    TargetedRebuildUnsupported(String),

    #[error("duplicate registration `{0}`")]
    DuplicateRegistration(String),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("tolerance exceeded: {}", .0.join("; "))]
    ToleranceExceeded(Vec<String>),

    #[error("missing upcaster for {event_type} v{from_version}")]
    MissingUpcaster { event_type: String, from_version: u32 },

    #[error("upcaster {event_type} v{from_version} broke its contract: {reason}")]
    UpcastContract {
        event_type: String,
        from_version: u32,
        reason: String,
    },

    #[error("transform failed on stream `{stream}`: {reason}")]
    TransformFailure { stream: String, reason: String },

    #[error("incompatible schema change: {0}")]
    Incompatible(String),

    #[error("invalid migration plan: {0}")]
    InvalidPlan(String),

    #[error("plan document line {line}: {reason}")]
    PlanParse { line: usize, reason: String },

    #[error("target store `{0}` is already in use")]
    TargetExists(String),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("script step {step} references unknown {what} `{name}`")]
    UnknownScriptTarget {
        step: usize,
        what: &'static str,
        name: String,
    },

    #[error("script line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}
