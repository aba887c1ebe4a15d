//! Migration plans and their line-JSON document form.
//!
//! ```text
//! {"kind":"migration_plan","format":1,"technique":"copy_transform","source_version":1,"target_version":2,"scope":"all","target_store":"../v2"}
//! {"kind":"action","action":"rename_field","event_type":"LicenseCreated","from_version":1,"from":"date","to":"startDate"}
//! ```
//!
//! Actions on the same (event type, from version) form one upcast step that
//! lifts the event to the next version. Field actions apply in document
//! order; a split or drop, if present, must come last in its step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::EvolutionError;
use crate::event::{Event, EventType, StreamId};
use crate::schema::StoreSchema;

use super::upcast::{Upcaster, UpcasterChain};

const PLAN_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    VersionedEvents,
    WeakSchema,
    Upcast,
    InPlace,
    CopyTransform,
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Technique::VersionedEvents => "versioned_events",
            Technique::WeakSchema => "weak_schema",
            Technique::Upcast => "upcast",
            Technique::InPlace => "in_place",
            Technique::CopyTransform => "copy_transform",
        })
    }
}

impl FromStr for Technique {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown technique `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum PlanScope {
    #[default]
    All,
    Streams(Vec<StreamId>),
}

impl PlanScope {
    pub fn includes(&self, stream: &StreamId) -> bool {
        match self {
            PlanScope::All => true,
            PlanScope::Streams(s) => s.contains(stream),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScopeRepr {
    Word(String),
    Streams { streams: Vec<StreamId> },
}

impl Serialize for PlanScope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PlanScope::All => ScopeRepr::Word("all".into()),
            PlanScope::Streams(streams) => ScopeRepr::Streams {
                streams: streams.clone(),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PlanScope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match ScopeRepr::deserialize(d)? {
            ScopeRepr::Word(w) if w == "all" => Ok(PlanScope::All),
            ScopeRepr::Word(w) => Err(serde::de::Error::custom(format!(
                "scope must be \"all\" or {{\"streams\":[...]}}, got `{w}`"
            ))),
            ScopeRepr::Streams { streams } => Ok(PlanScope::Streams(streams)),
        }
    }
}

/// One part of a split: the fields of the original payload it takes over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPart {
    pub event_type: String,
    pub version: u32,
    pub fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// A new event type; needs no transformation.
    AddType { event_type: String, version: u32 },
    AddField {
        event_type: String,
        from_version: u32,
        field: String,
        default: Value,
    },
    RenameField {
        event_type: String,
        from_version: u32,
        from: String,
        to: String,
    },
    DropField {
        event_type: String,
        from_version: u32,
        field: String,
    },
    SplitEvent {
        event_type: String,
        from_version: u32,
        into: Vec<SplitPart>,
    },
    DropEvent { event_type: String, from_version: u32 },
}

impl Action {
    pub fn event_type(&self) -> &str {
        match self {
            Action::AddType { event_type, .. }
            | Action::AddField { event_type, .. }
            | Action::RenameField { event_type, .. }
            | Action::DropField { event_type, .. }
            | Action::SplitEvent { event_type, .. }
            | Action::DropEvent { event_type, .. } => event_type,
        }
    }

    /// The (type, from_version) step this action belongs to, if it
    /// transforms events at all.
    pub fn step(&self) -> Option<(&str, u32)> {
        match self {
            Action::AddType { .. } => None,
            Action::AddField { event_type, from_version, .. }
            | Action::RenameField { event_type, from_version, .. }
            | Action::DropField { event_type, from_version, .. }
            | Action::SplitEvent { event_type, from_version, .. }
            | Action::DropEvent { event_type, from_version } => Some((event_type, *from_version)),
        }
    }

    fn is_terminal(&self) -> bool {
        matches!(self, Action::SplitEvent { .. } | Action::DropEvent { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanHeader {
    format: u32,
    technique: Technique,
    source_version: u32,
    target_version: u32,
    #[serde(default)]
    scope: PlanScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_store: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MigrationPlan {
    pub technique: Technique,
    pub source_version: u32,
    pub target_version: u32,
    pub scope: PlanScope,
    pub actions: Vec<Action>,
    /// Schema documents and target store location, relative to the plan
    /// document.
    pub source_schema: Option<String>,
    pub target_schema: Option<String>,
    pub target_store: Option<String>,
}

impl MigrationPlan {
    pub fn new(technique: Technique, source_version: u32, target_version: u32) -> Self {
        Self {
            technique,
            source_version,
            target_version,
            scope: PlanScope::All,
            actions: Vec::new(),
            source_schema: None,
            target_schema: None,
            target_store: None,
        }
    }

    pub fn action(mut self, action: Action) -> Self {
        self.actions.push(action);
        self
    }

    pub fn scope(mut self, scope: PlanScope) -> Self {
        self.scope = scope;
        self
    }

    /// Structural checks, plus declared-type checks against whichever
    /// schemas are given.
    pub fn validate(&self, source: Option<&StoreSchema>, target: Option<&StoreSchema>) -> Result<(), EvolutionError> {
        let bad = |m: String| Err(EvolutionError::InvalidPlan(m));
        if self.source_version == 0 || self.target_version < self.source_version {
            return bad(format!(
                "target version {} must not precede source version {}",
                self.target_version, self.source_version
            ));
        }
        let mut closed: BTreeSet<(&str, u32)> = BTreeSet::new();
        for a in &self.actions {
            if let Err(e) = EventType::new(a.event_type()) {
                return bad(e.to_string());
            }
            if let Some(step) = a.step() {
                if step.1 == 0 {
                    return bad(format!("{}: from_version must be at least 1", step.0));
                }
                if closed.contains(&step) {
                    return bad(format!("{} v{}: actions after a split or drop", step.0, step.1));
                }
                if a.is_terminal() {
                    closed.insert(step);
                }
            }
            if let Action::SplitEvent { into, event_type, .. } = a {
                if into.is_empty() {
                    return bad(format!("split of {event_type} has no parts"));
                }
                for part in into {
                    if let Err(e) = EventType::new(&part.event_type) {
                        return bad(e.to_string());
                    }
                    if part.version == 0 {
                        return bad(format!("split part {} has version 0", part.event_type));
                    }
                }
            }
        }
        if source.is_none() && target.is_none() {
            return Ok(());
        }
        let declared: BTreeSet<&str> = source
            .into_iter()
            .chain(target)
            .flat_map(|s| s.stream_schemas.iter())
            .flat_map(|s| s.event_schemas.iter().map(|e| e.event_type.as_str()))
            .collect();
        for a in &self.actions {
            let mut types = vec![a.event_type()];
            if let Action::SplitEvent { into, .. } = a {
                types.extend(into.iter().map(|p| p.event_type.as_str()));
            }
            for t in types {
                if !declared.contains(t) {
                    return bad(format!("event type {t} is declared in neither schema"));
                }
            }
        }
        Ok(())
    }

    /// The upcaster chain realizing the plan's actions.
    pub fn upcasters(&self) -> UpcasterChain {
        let mut groups: BTreeMap<(String, u32), Vec<Action>> = BTreeMap::new();
        for a in &self.actions {
            if let Some((t, v)) = a.step() {
                groups.entry((t.to_string(), v)).or_default().push(a.clone());
            }
        }
        let mut chain = UpcasterChain::new();
        for ((event_type, from), actions) in groups {
            chain.add(Upcaster::new(event_type, from, move |event| apply_step(event, from, &actions)));
        }
        chain
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = PlanHeader {
            format: PLAN_FORMAT,
            technique: self.technique,
            source_version: self.source_version,
            target_version: self.target_version,
            scope: self.scope.clone(),
            source_schema: self.source_schema.clone(),
            target_schema: self.target_schema.clone(),
            target_store: self.target_store.clone(),
        };
        let mut out = Vec::new();
        write_tagged(&mut out, "migration_plan", &header);
        for a in &self.actions {
            write_tagged(&mut out, "action", a);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, EvolutionError> {
        let mut plan: Option<MigrationPlan> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |reason: String| EvolutionError::PlanParse { line, reason };
            let mut obj: Map<String, Value> = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
            let kind = match obj.remove("kind") {
                Some(Value::String(k)) => k,
                _ => return Err(err("missing \"kind\"".into())),
            };
            match (kind.as_str(), plan.as_mut()) {
                ("migration_plan", None) => {
                    let h: PlanHeader = serde_json::from_value(Value::Object(obj)).map_err(|e| err(e.to_string()))?;
                    if h.format != PLAN_FORMAT {
                        return Err(err(format!("unsupported plan format {}", h.format)));
                    }
                    plan = Some(MigrationPlan {
                        technique: h.technique,
                        source_version: h.source_version,
                        target_version: h.target_version,
                        scope: h.scope,
                        actions: Vec::new(),
                        source_schema: h.source_schema,
                        target_schema: h.target_schema,
                        target_store: h.target_store,
                    });
                }
                ("migration_plan", Some(_)) => return Err(err("second migration_plan header".into())),
                (_, None) => return Err(err("document must start with a migration_plan header".into())),
                ("action", Some(p)) => {
                    let a: Action = serde_json::from_value(Value::Object(obj)).map_err(|e| err(e.to_string()))?;
                    p.actions.push(a);
                }
                (other, Some(_)) => return Err(err(format!("unknown kind `{other}`"))),
            }
        }
        let plan = plan.ok_or(EvolutionError::PlanParse {
            line: 0,
            reason: "empty plan document".into(),
        })?;
        plan.validate(None, None)?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, EvolutionError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvolutionError::PlanParse {
            line: 0,
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }
}

fn write_tagged(out: &mut Vec<u8>, kind: &str, value: &impl Serialize) {
    let mut obj = Map::new();
    obj.insert("kind".into(), Value::String(kind.into()));
    if let Value::Object(fields) = serde_json::to_value(value).expect("plan serializes") {
        obj.extend(fields);
    }
    serde_json::to_writer(&mut *out, &obj).expect("plan serializes");
    out.push(b'\n');
}

fn apply_step(mut event: Event, from: u32, actions: &[Action]) -> Vec<Event> {
    for a in actions {
        match a {
            Action::AddField { field, default, .. } => {
                if !event.payload.contains_key(field) {
                    event.payload.insert(field.clone(), default.clone());
                }
            }
            Action::RenameField { from, to, .. } => {
                event.payload.rename(from, to);
            }
            Action::DropField { field, .. } => {
                event.payload.remove(field);
            }
            Action::DropEvent { .. } => return Vec::new(),
            Action::SplitEvent { into, .. } => {
                return into
                    .iter()
                    .map(|part| {
                        let payload = part
                            .fields
                            .iter()
                            .filter_map(|f| event.payload.get(f).map(|v| (f.clone(), v.clone())))
                            .collect();
                        Event {
                            event_type: EventType::new(&part.event_type).expect("validated type name"),
                            schema_version: part.version,
                            payload,
                            metadata: event.metadata.clone(),
                        }
                    })
                    .collect();
            }
            Action::AddType { .. } => {}
        }
    }
    event.schema_version = from + 1;
    vec![event]
}
