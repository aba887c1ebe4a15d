//! Declarative event, stream and store schemas and the three `conforms`
//! predicates.
//!
//! * An [`EventSchema`] fixes an event type, a version and typed fields.
//! * A [`StreamSchema`] lists the event schemas a stream type may contain and
//!   the ordering rules its event sequence must obey.
//! * A [`StoreSchema`] lists stream schemas plus cohesion rules between
//!   streams ("a stream of type A containing E requires a stream of type B").
//!
//! Conformance never fails: violations are returned as data.

pub mod doc;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::SchemaError;
use crate::event::{is_type_name, Event, SequencedEvent};
use crate::store::{EventStore, EventStream};

/// Value kinds a field may declare.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldKind {
    String,
    Integer,
    Decimal,
    Boolean,
    /// An RFC 3339 date-time or a `YYYY-MM-DD` date, as a string.
    Timestamp,
    ListOf(Box<FieldKind>),
    MapOf(Box<FieldKind>),
}

impl FieldKind {
    pub fn matches(&self, value: &Value) -> bool {
        match (self, value) {
            (FieldKind::String, Value::String(_)) => true,
            (FieldKind::Integer, Value::Number(n)) => n.is_i64() || n.is_u64(),
            (FieldKind::Decimal, Value::Number(_)) => true,
            (FieldKind::Boolean, Value::Bool(_)) => true,
            (FieldKind::Timestamp, Value::String(s)) => is_timestamp(s),
            (FieldKind::ListOf(k), Value::Array(items)) => items.iter().all(|v| k.matches(v)),
            (FieldKind::MapOf(k), Value::Object(map)) => map.values().all(|v| k.matches(v)),
            _ => false,
        }
    }
}

fn is_timestamp(s: &str) -> bool {
    chrono::DateTime::parse_from_rfc3339(s).is_ok()
        || chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok()
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::String => f.write_str("string"),
            FieldKind::Integer => f.write_str("integer"),
            FieldKind::Decimal => f.write_str("decimal"),
            FieldKind::Boolean => f.write_str("boolean"),
            FieldKind::Timestamp => f.write_str("timestamp"),
            FieldKind::ListOf(k) => write!(f, "list<{k}>"),
            FieldKind::MapOf(k) => write!(f, "map<{k}>"),
        }
    }
}

impl FromStr for FieldKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let inner = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|rest| rest.strip_suffix('>'))
                .map(|k| k.parse::<FieldKind>())
        };
        match s {
            "string" => Ok(FieldKind::String),
            "integer" => Ok(FieldKind::Integer),
            "decimal" => Ok(FieldKind::Decimal),
            "boolean" => Ok(FieldKind::Boolean),
            "timestamp" => Ok(FieldKind::Timestamp),
            _ => {
                if let Some(k) = inner("list<") {
                    Ok(FieldKind::ListOf(Box::new(k?)))
                } else if let Some(k) = inner("map<") {
                    Ok(FieldKind::MapOf(Box::new(k?)))
                } else {
                    Err(format!("unknown field kind `{s}`"))
                }
            }
        }
    }
}

impl Serialize for FieldKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl FieldSpec {
    pub fn required(name: impl Into<String>, kind: FieldKind) -> Self {
        Self {
            name: name.into(),
            kind,
            required: true,
            default: None,
        }
    }

    pub fn optional(name: impl Into<String>, kind: FieldKind) -> Self {
        Self {
            name: name.into(),
            kind,
            required: false,
            default: None,
        }
    }

    pub fn with_default(mut self, value: impl Into<Value>) -> Self {
        self.default = Some(value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSchema {
    pub event_type: String,
    pub version: u32,
    pub fields: Vec<FieldSpec>,
    /// When set, undeclared payload fields are violations. Off by default:
    /// open content is what lets a tolerant reader absorb additions.
    pub strict_content: bool,
}

impl EventSchema {
    pub fn new(event_type: impl Into<String>, version: u32) -> Self {
        Self {
            event_type: event_type.into(),
            version,
            fields: Vec::new(),
            strict_content: false,
        }
    }

    pub fn field(mut self, spec: FieldSpec) -> Self {
        self.fields.push(spec);
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict_content = strict;
        self
    }

    pub fn key(&self) -> (&str, u32) {
        (&self.event_type, self.version)
    }

    pub fn field_spec(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if !is_type_name(&self.event_type) {
            return Err(SchemaError::Invalid(format!("bad event type `{}`", self.event_type)));
        }
        if self.version == 0 {
            return Err(SchemaError::Invalid(format!("{} has version 0", self.event_type)));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(SchemaError::Invalid(format!(
                    "{} v{}: duplicate field `{}`",
                    self.event_type, self.version, f.name
                )));
            }
            if let Some(d) = &f.default {
                if !f.kind.matches(d) {
                    return Err(SchemaError::Invalid(format!(
                        "{} v{}: default of `{}` is not a {}",
                        self.event_type, self.version, f.name, f.kind
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum OrderingRule {
    /// Every `object` event has an earlier `subject` event.
    Precedes { subject: String, object: String },
    /// `subject` occurs at most once.
    AtMostOnce { subject: String },
    /// A non-empty stream starts with `subject`.
    Initial { subject: String },
    /// Nothing follows a `subject` event.
    Terminal { subject: String },
}

impl OrderingRule {
    pub fn precedes(subject: impl Into<String>, object: impl Into<String>) -> Self {
        OrderingRule::Precedes {
            subject: subject.into(),
            object: object.into(),
        }
    }

    pub fn at_most_once(subject: impl Into<String>) -> Self {
        OrderingRule::AtMostOnce { subject: subject.into() }
    }

    pub fn initial(subject: impl Into<String>) -> Self {
        OrderingRule::Initial { subject: subject.into() }
    }

    pub fn terminal(subject: impl Into<String>) -> Self {
        OrderingRule::Terminal { subject: subject.into() }
    }

    pub fn referenced_types(&self) -> Vec<&str> {
        match self {
            OrderingRule::Precedes { subject, object } => vec![subject, object],
            OrderingRule::AtMostOnce { subject }
            | OrderingRule::Initial { subject }
            | OrderingRule::Terminal { subject } => vec![subject],
        }
    }

    /// Sequences of the events that break this rule, with a reason each.
    pub fn check<'a>(&self, events: impl IntoIterator<Item = (&'a str, u64)>) -> Vec<(u64, String)> {
        let mut out = Vec::new();
        match self {
            OrderingRule::Precedes { subject, object } => {
                let mut seen = false;
                for (t, seq) in events {
                    if t == subject {
                        seen = true;
                    }
                    if t == object && !seen {
                        out.push((seq, format!("{object} occurs before any {subject}")));
                    }
                }
            }
            OrderingRule::AtMostOnce { subject } => {
                let mut seen = false;
                for (t, seq) in events {
                    if t == subject {
                        if seen {
                            out.push((seq, format!("{subject} occurs more than once")));
                        }
                        seen = true;
                    }
                }
            }
            OrderingRule::Initial { subject } => {
                if let Some((t, seq)) = events.into_iter().next() {
                    if t != subject {
                        out.push((seq, format!("stream starts with {t}, not {subject}")));
                    }
                }
            }
            OrderingRule::Terminal { subject } => {
                let mut closed = false;
                for (t, seq) in events {
                    if closed {
                        out.push((seq, format!("{t} follows terminal {subject}")));
                        break;
                    }
                    if t == subject {
                        closed = true;
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for OrderingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderingRule::Precedes { subject, object } => write!(f, "precedes({subject}, {object})"),
            OrderingRule::AtMostOnce { subject } => write!(f, "at_most_once({subject})"),
            OrderingRule::Initial { subject } => write!(f, "initial({subject})"),
            OrderingRule::Terminal { subject } => write!(f, "terminal({subject})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSchema {
    pub stream_type: String,
    pub event_schemas: Vec<EventSchema>,
    pub rules: Vec<OrderingRule>,
}

impl StreamSchema {
    pub fn new(stream_type: impl Into<String>) -> Self {
        Self {
            stream_type: stream_type.into(),
            event_schemas: Vec::new(),
            rules: Vec::new(),
        }
    }

    pub fn event(mut self, schema: EventSchema) -> Self {
        self.event_schemas.push(schema);
        self
    }

    pub fn rule(mut self, rule: OrderingRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn event_schema(&self, event_type: &str, version: u32) -> Option<&EventSchema> {
        self.event_schemas
            .iter()
            .find(|s| s.event_type == event_type && s.version == version)
    }

    pub fn event_types(&self) -> BTreeSet<&str> {
        self.event_schemas.iter().map(|s| s.event_type.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if !is_type_name(&self.stream_type) {
            return Err(SchemaError::Invalid(format!("bad stream type `{}`", self.stream_type)));
        }
        let mut keys = HashSet::new();
        for s in &self.event_schemas {
            s.validate()?;
            if !keys.insert(s.key()) {
                return Err(SchemaError::Invalid(format!(
                    "stream type {}: {} v{} declared twice",
                    self.stream_type, s.event_type, s.version
                )));
            }
        }
        let types = self.event_types();
        for rule in &self.rules {
            if let OrderingRule::Precedes { subject, object } = rule {
                if subject == object {
                    return Err(SchemaError::Invalid(format!("{rule}: subject and object must differ")));
                }
            }
            for t in rule.referenced_types() {
                if !types.contains(t) {
                    return Err(SchemaError::Invalid(format!(
                        "stream type {}: rule {rule} references undeclared event type {t}",
                        self.stream_type
                    )));
                }
            }
        }
        Ok(())
    }
}

/// "When a stream of type `stream_type` contains an `event_type` event, a
/// stream of type `requires_stream_type` must exist."
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohesionRule {
    pub stream_type: String,
    pub event_type: String,
    pub requires_stream_type: String,
}

impl fmt::Display for CohesionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cohesion({} containing {} requires {})",
            self.stream_type, self.event_type, self.requires_stream_type
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreSchema {
    pub schema_id: String,
    pub schema_version: u32,
    pub stream_schemas: Vec<StreamSchema>,
    pub cohesion_rules: Vec<CohesionRule>,
}

impl StoreSchema {
    pub fn new(schema_id: impl Into<String>, schema_version: u32) -> Self {
        Self {
            schema_id: schema_id.into(),
            schema_version,
            stream_schemas: Vec::new(),
            cohesion_rules: Vec::new(),
        }
    }

    pub fn stream(mut self, schema: StreamSchema) -> Self {
        self.stream_schemas.push(schema);
        self
    }

    pub fn cohesion(mut self, rule: CohesionRule) -> Self {
        self.cohesion_rules.push(rule);
        self
    }

    pub fn stream_schema(&self, stream_type: &str) -> Option<&StreamSchema> {
        self.stream_schemas.iter().find(|s| s.stream_type == stream_type)
    }

    pub fn stream_schema_mut(&mut self, stream_type: &str) -> Option<&mut StreamSchema> {
        self.stream_schemas.iter_mut().find(|s| s.stream_type == stream_type)
    }

    /// Finds the event schema for an event within a stream type.
    pub fn event_schema(&self, stream_type: &str, event_type: &str, version: u32) -> Option<&EventSchema> {
        self.stream_schema(stream_type)?.event_schema(event_type, version)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.schema_version == 0 {
            return Err(SchemaError::Invalid("schema version must be at least 1".into()));
        }
        let mut names = HashSet::new();
        for s in &self.stream_schemas {
            s.validate()?;
            if !names.insert(s.stream_type.as_str()) {
                return Err(SchemaError::Invalid(format!("stream type {} declared twice", s.stream_type)));
            }
        }
        for rule in &self.cohesion_rules {
            let Some(source) = self.stream_schema(&rule.stream_type) else {
                return Err(SchemaError::Invalid(format!("{rule}: undeclared stream type {}", rule.stream_type)));
            };
            if !source.event_types().contains(rule.event_type.as_str()) {
                return Err(SchemaError::Invalid(format!(
                    "{rule}: {} is not an event type of {}",
                    rule.event_type, rule.stream_type
                )));
            }
            if !names.contains(rule.requires_stream_type.as_str()) {
                return Err(SchemaError::Invalid(format!(
                    "{rule}: undeclared stream type {}",
                    rule.requires_stream_type
                )));
            }
        }
        Ok(())
    }
}

/// One way in which data fails a schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<u64>,
    /// The ordering or cohesion rule that failed, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    pub message: String,
}

impl Violation {
    fn new(message: impl Into<String>) -> Self {
        Self {
            stream: None,
            sequence: None,
            rule: None,
            message: message.into(),
        }
    }

    fn at(mut self, stream: &str, sequence: Option<u64>) -> Self {
        self.stream = Some(stream.to_string());
        self.sequence = sequence;
        self
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.stream, self.sequence) {
            (Some(s), Some(n)) => write!(f, "{s}#{n}: ")?,
            (Some(s), None) => write!(f, "{s}: ")?,
            _ => {}
        }
        if let Some(rule) = &self.rule {
            write!(f, "{rule}: ")?;
        }
        f.write_str(&self.message)
    }
}

/// Outcome of a conformance check.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conformance {
    pub violations: Vec<Violation>,
}

impl Conformance {
    pub fn conforms(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.message.clone()).collect()
    }
}

pub fn conforms_event(event: &Event, schema: &EventSchema) -> Conformance {
    let mut violations = Vec::new();
    if event.event_type.as_str() != schema.event_type {
        violations.push(Violation::new(format!(
            "event type {} does not match schema type {}",
            event.event_type, schema.event_type
        )));
    }
    if event.schema_version != schema.version {
        violations.push(Violation::new(format!(
            "version {} does not match schema version {}",
            event.schema_version, schema.version
        )));
    }
    for spec in &schema.fields {
        match event.payload.get(&spec.name) {
            None if spec.required => {
                violations.push(Violation::new(format!("missing required field {}", spec.name)));
            }
            None => {}
            Some(v) if !spec.kind.matches(v) => {
                violations.push(Violation::new(format!(
                    "field {} is not a {} (got {})",
                    spec.name,
                    spec.kind,
                    value_kind(v)
                )));
            }
            Some(_) => {}
        }
    }
    if schema.strict_content {
        for key in event.payload.keys() {
            if schema.field_spec(key).is_none() {
                violations.push(Violation::new(format!("undeclared field {key}")));
            }
        }
    }
    Conformance { violations }
}

pub(crate) fn value_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_f64() => "decimal",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "map",
    }
}

/// Checks entries against a stream schema: each event must match a member
/// event schema by type and version, and every ordering rule must hold.
pub fn conforms_entries(stream: &str, entries: &[SequencedEvent], schema: &StreamSchema) -> Conformance {
    let mut violations = Vec::new();
    for entry in entries {
        let e = &entry.event;
        match schema.event_schema(e.event_type.as_str(), e.schema_version) {
            None => violations.push(
                Violation::new(format!("no event schema for type {} v{}", e.event_type, e.schema_version))
                    .at(stream, Some(entry.sequence)),
            ),
            Some(es) => {
                for v in conforms_event(e, es).violations {
                    violations.push(v.at(stream, Some(entry.sequence)));
                }
            }
        }
    }
    for rule in &schema.rules {
        let seq = entries.iter().map(|e| (e.event.event_type.as_str(), e.sequence));
        for (sequence, message) in rule.check(seq) {
            let mut v = Violation::new(message).at(stream, Some(sequence));
            v.rule = Some(rule.to_string());
            violations.push(v);
        }
    }
    Conformance { violations }
}

pub fn conforms_stream(stream: &EventStream, schema: &StreamSchema) -> Conformance {
    conforms_entries(stream.stream_id.as_str(), &stream.entries, schema)
}

/// Store conformance over stream snapshots.
pub fn conforms_streams(streams: &[EventStream], schema: &StoreSchema) -> Result<Conformance, SchemaError> {
    let mut violations = Vec::new();
    for s in streams {
        let Some(stream_type) = &s.stream_type else {
            return Err(SchemaError::UnassignedStreamType(s.stream_id.to_string()));
        };
        match schema.stream_schema(stream_type) {
            None => violations.push(
                Violation::new(format!("no stream schema for type {stream_type}")).at(s.stream_id.as_str(), None),
            ),
            Some(ss) => violations.extend(conforms_stream(s, ss).violations),
        }
    }
    for rule in &schema.cohesion_rules {
        let target_exists = streams
            .iter()
            .any(|s| s.stream_type.as_deref() == Some(rule.requires_stream_type.as_str()));
        if target_exists {
            continue;
        }
        for s in streams {
            if s.stream_type.as_deref() != Some(rule.stream_type.as_str()) {
                continue;
            }
            if let Some(hit) = s.entries.iter().find(|e| e.event.event_type == rule.event_type.as_str()) {
                let mut v = Violation::new(format!(
                    "contains {} but no stream of type {} exists",
                    rule.event_type, rule.requires_stream_type
                ))
                .at(s.stream_id.as_str(), Some(hit.sequence));
                v.rule = Some(rule.to_string());
                violations.push(v);
            }
        }
    }
    Ok(Conformance { violations })
}

pub fn conforms_store(store: &EventStore, schema: &StoreSchema) -> Result<Conformance, SchemaError> {
    conforms_streams(&store.streams(), schema)
}

/// Whether every stream valid under `old` stays valid under `new`: each old
/// stream schema must have a new one with the same stream type that keeps
/// every old event schema unchanged, and any rule `new` adds must be vacuous
/// over the event types `old` allows.
pub fn schema_superset(old: &StoreSchema, new: &StoreSchema) -> bool {
    superset_gaps(old, new).is_empty()
}

/// Reasons why `new` is not a superset of `old`; empty when it is.
pub fn superset_gaps(old: &StoreSchema, new: &StoreSchema) -> Vec<String> {
    let mut gaps = Vec::new();
    for old_stream in &old.stream_schemas {
        let Some(new_stream) = new.stream_schema(&old_stream.stream_type) else {
            gaps.push(format!("stream type {} was removed", old_stream.stream_type));
            continue;
        };
        for es in &old_stream.event_schemas {
            match new_stream.event_schema(&es.event_type, es.version) {
                None => gaps.push(format!(
                    "{}: event schema {} v{} was removed",
                    old_stream.stream_type, es.event_type, es.version
                )),
                Some(n) if n != es => gaps.push(format!(
                    "{}: event schema {} v{} was changed",
                    old_stream.stream_type, es.event_type, es.version
                )),
                Some(_) => {}
            }
        }
        let old_types = old_stream.event_types();
        for rule in &new_stream.rules {
            if old_stream.rules.contains(rule) || rule_is_vacuous(rule, &old_types) {
                continue;
            }
            gaps.push(format!("{}: rule {rule} constrains existing events", old_stream.stream_type));
        }
    }
    for rule in &new.cohesion_rules {
        if old.cohesion_rules.contains(rule) {
            continue;
        }
        let applies = old
            .stream_schema(&rule.stream_type)
            .is_some_and(|s| s.event_types().contains(rule.event_type.as_str()));
        if applies {
            gaps.push(format!("{rule} constrains existing streams"));
        }
    }
    gaps
}

/// A rule is vacuous over a set of event types when no sequence drawn from
/// those types can break it.
fn rule_is_vacuous(rule: &OrderingRule, types: &BTreeSet<&str>) -> bool {
    match rule {
        OrderingRule::Precedes { object, .. } => !types.contains(object.as_str()),
        OrderingRule::AtMostOnce { subject } | OrderingRule::Terminal { subject } => {
            !types.contains(subject.as_str())
        }
        OrderingRule::Initial { .. } => false,
    }
}
