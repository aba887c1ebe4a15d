//! `store.meta`, the single-line manifest at the root of every store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::StoreError;
use crate::store::ImmutabilityPolicy;

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "store.meta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u64,
    pub store_id: String,
    pub policy: ImmutabilityPolicy,
    /// Path of the bound schema document, relative to the store root.
    #[serde(default)]
    pub schema: Option<String>,
    /// Per-stream metadata. A stream with a log file but no entry here is an
    /// untyped stream with nothing archived.
    #[serde(default)]
    pub streams: BTreeMap<String, StreamMeta>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamMeta {
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub stream_type: Option<String>,
    /// Number of leading events moved to cold storage.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub archived: u64,
    /// Archive files holding those events, oldest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub archives: Vec<String>,
}

fn is_zero(n: &u64) -> bool {
    *n == 0
}

impl Manifest {
    pub fn new(store_id: impl Into<String>, policy: ImmutabilityPolicy) -> Self {
        Self {
            format: FORMAT_VERSION,
            store_id: store_id.into(),
            policy,
            schema: None,
            streams: BTreeMap::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    /// Parses a manifest. The format version is checked before anything
    /// else so that a future layout is reported as such, never guessed at.
    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| StoreError::StoreCorrupt(format!("{MANIFEST_FILE}: {e}")))?;
        let line = text.strip_suffix('\n').unwrap_or(text);
        let raw: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| StoreError::StoreCorrupt(format!("{MANIFEST_FILE}: {e}")))?;
        match raw.get("format").and_then(|v| v.as_u64()) {
            Some(FORMAT_VERSION) => {}
            Some(other) => return Err(StoreError::UnknownFormatVersion(other)),
            None => {
                return Err(StoreError::StoreCorrupt(format!(
                    "{MANIFEST_FILE}: missing format version"
                )))
            }
        }
        serde_json::from_value(raw).map_err(|e| StoreError::StoreCorrupt(format!("{MANIFEST_FILE}: {e}")))
    }
}
