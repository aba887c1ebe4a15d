//! Events, sequenced events and the identifiers that name them.

use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::StoreError;

/// Longest accepted stream or store identifier.
pub const MAX_NAME_LEN: usize = 128;

/// Stream ids that would collide with files in the store root.
const RESERVED_STREAM_IDS: &[&str] = &["journal", "store"];

/// Name of a kind of event, e.g. `LicenseCreated`.
///
/// Must match `[A-Za-z][A-Za-z0-9_]*`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct EventType(String);

impl EventType {
    pub fn new(name: impl Into<String>) -> Result<Self, StoreError> {
        let name = name.into();
        if is_type_name(&name) {
            Ok(Self(name))
        } else {
            Err(StoreError::InvalidName {
                what: "event type",
                name,
            })
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub(crate) fn is_type_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for EventType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        EventType::new(s).map_err(de::Error::custom)
    }
}

impl PartialEq<str> for EventType {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for EventType {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// Identifier of a stream inside a store. Doubles as the log file stem on disk,
/// so it is restricted to `[A-Za-z0-9][A-Za-z0-9_.-]*`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct StreamId(String);

impl StreamId {
    pub fn new(id: impl Into<String>) -> Result<Self, StoreError> {
        let id = id.into();
        let mut chars = id.chars();
        let ok = matches!(chars.next(), Some(c) if c.is_ascii_alphanumeric())
            && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            && id.len() <= MAX_NAME_LEN
            && !RESERVED_STREAM_IDS.contains(&id.as_str());
        if ok {
            Ok(Self(id))
        } else {
            Err(StoreError::InvalidName {
                what: "stream id",
                name: id,
            })
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for StreamId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        StreamId::new(s).map_err(de::Error::custom)
    }
}

impl TryFrom<&str> for StreamId {
    type Error = StoreError;
    fn try_from(s: &str) -> Result<Self, StoreError> {
        StreamId::new(s)
    }
}

/// Ordered field map carried by an event. Keys keep insertion order and are
/// unique; duplicate keys are rejected when decoding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Payload(Map<String, Value>);

impl Payload {
    pub fn new() -> Self {
        Self(Map::new())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    /// Inserts or replaces a field. A new key goes to the end.
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) -> Option<Value> {
        self.0.insert(key.into(), value.into())
    }

    /// Removes a field, keeping the order of the others.
    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.0.shift_remove(key)
    }

    /// Renames a field in place. Returns false when `from` is absent.
    pub fn rename(&mut self, from: &str, to: &str) -> bool {
        if !self.0.contains_key(from) {
            return false;
        }
        let old = std::mem::take(&mut self.0);
        self.0 = old
            .into_iter()
            .filter(|(k, _)| k != to || from == to)
            .map(|(k, v)| if k == from { (to.to_string(), v) } else { (k, v) })
            .collect();
        true
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn as_map(&self) -> &Map<String, Value> {
        &self.0
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}

impl From<Map<String, Value>> for Payload {
    fn from(map: Map<String, Value>) -> Self {
        Self(map)
    }
}

impl<K: Into<String>, V: Into<Value>> FromIterator<(K, V)> for Payload {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct PayloadVisitor;

        impl<'de> Visitor<'de> for PayloadVisitor {
            type Value = Payload;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a payload object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Payload, A::Error> {
                let mut map = Map::new();
                while let Some((key, value)) = access.next_entry::<String, Value>()? {
                    if map.contains_key(&key) {
                        return Err(de::Error::custom(format!("duplicate payload key `{key}`")));
                    }
                    map.insert(key, value);
                }
                Ok(Payload(map))
            }
        }

        d.deserialize_map(PayloadVisitor)
    }
}

/// Record-keeping data attached to an event. Never used for ordering and
/// ignored by schema conformance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    /// Record time in UTC milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded_at: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub causation_id: Option<String>,
}

/// One state change expressed in domain terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub event_type: EventType,
    pub schema_version: u32,
    pub payload: Payload,
    pub metadata: Metadata,
}

impl Event {
    pub fn new(
        event_type: impl Into<String>,
        schema_version: u32,
        payload: Payload,
    ) -> Result<Self, StoreError> {
        let event = Self {
            event_type: EventType::new(event_type)?,
            schema_version,
            payload,
            metadata: Metadata::default(),
        };
        event.validate()?;
        Ok(event)
    }

    pub fn with_metadata(mut self, metadata: Metadata) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.schema_version == 0 {
            return Err(StoreError::InvalidEvent(format!(
                "{}: schema version must be at least 1",
                self.event_type
            )));
        }
        Ok(())
    }
}

/// An event together with its position in a stream (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SequencedEvent {
    pub sequence: u64,
    pub event: Event,
}

impl SequencedEvent {
    pub fn new(sequence: u64, event: Event) -> Self {
        Self { sequence, event }
    }
}

/// Builds a payload from `key => value` pairs.
#[macro_export]
macro_rules! payload {
    () => { $crate::event::Payload::new() };
    ($($key:expr => $value:expr),+ $(,)?) => {{
        let mut p = $crate::event::Payload::new();
        $( p.insert($key, ::serde_json::json!($value)); )+
        p
    }};
}
