//! Schema evolution: five techniques for living with changed event schemas.
//!
//! | technique          | touches stored events | entry point |
//! |--------------------|-----------------------|-------------|
//! | versioned events   | no                    | [`check_versioned_events`] |
//! | weak schema        | no                    | [`weak_read`] |
//! | upcasting          | no                    | [`UpcasterChain`] |
//! | in-place transform | yes                   | [`in_place_transform`] |
//! | copy and transform | no (writes a new store) | [`copy_transform`] |
//!
//! Plans ([`MigrationPlan`]) describe a change once; [`migrate`] runs it
//! with the technique the plan names.

mod plan;
mod upcast;

use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{EvolutionError, StoreError};
use crate::event::{Event, StreamId};
use crate::format;
use crate::schema::{
    conforms_entries, conforms_store, conforms_streams, superset_gaps, value_kind, EventSchema, StoreSchema,
};
use crate::store::{BackupId, Edit, EventStore, EventStream};

pub use plan::{Action, MigrationPlan, PlanScope, SplitPart, Technique};
pub use upcast::{upcast_stream, UpcastFn, Upcaster, UpcasterChain};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Compatibility {
    Compatible,
    Incompatible(String),
}

/// Versioned events: a new schema may be adopted without touching stored
/// events exactly when it is a superset of the old one.
pub fn check_versioned_events(old: &StoreSchema, new: &StoreSchema) -> Compatibility {
    let gaps = superset_gaps(old, new);
    if gaps.is_empty() {
        Compatibility::Compatible
    } else {
        Compatibility::Incompatible(format!("not a superset: {}", gaps.join("; ")))
    }
}

/// Tolerant reader over a serialized event envelope.
pub fn weak_read(raw: &[u8], schema: &EventSchema) -> Result<Event, EvolutionError> {
    let event = format::decode_envelope(raw).map_err(|e| EvolutionError::ToleranceExceeded(vec![e]))?;
    weak_read_event(event, schema).map(|(e, _)| e)
}

/// Tolerant reading of a decoded event: undeclared fields are kept but not
/// looked at, absent fields with a default get it, and the event keeps its
/// stored version. Returns the event and how many defaults were filled.
pub fn weak_read_event(mut event: Event, schema: &EventSchema) -> Result<(Event, u64), EvolutionError> {
    let mut problems = Vec::new();
    if event.event_type.as_str() != schema.event_type {
        problems.push(format!(
            "event type {} cannot be read as {}",
            event.event_type, schema.event_type
        ));
    }
    let mut filled = 0;
    for spec in &schema.fields {
        match event.payload.get(&spec.name) {
            Some(v) if !spec.kind.matches(v) => {
                problems.push(format!("field {} is not a {} (got {})", spec.name, spec.kind, value_kind(v)));
            }
            Some(_) => {}
            None => match &spec.default {
                Some(d) => {
                    event.payload.insert(spec.name.clone(), d.clone());
                    filled += 1;
                }
                None if spec.required => problems.push(format!("missing required field {}", spec.name)),
                None => {}
            },
        }
    }
    if problems.is_empty() {
        Ok((event, filled))
    } else {
        Err(EvolutionError::ToleranceExceeded(problems))
    }
}

/// What a migration did (or, in a dry run, would do) to one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamReport {
    pub stream: String,
    pub events_before: u64,
    pub events_after: u64,
    pub updated: u64,
    pub inserted: u64,
    pub deleted: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backup: Option<BackupId>,
    /// Old sequence to the new sequences it became.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lineage: Vec<(u64, Vec<u64>)>,
}

impl StreamReport {
    pub fn mutations(&self) -> u64 {
        self.updated + self.inserted + self.deleted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MigrationReport {
    pub technique: Technique,
    pub dry_run: bool,
    pub streams: Vec<StreamReport>,
    pub events_read: u64,
    #[serde(skip_serializing_if = "is_zero")]
    pub defaults_filled: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_store: Option<String>,
    /// Whether the result conforms to the target schema, when one was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conforms: Option<bool>,
}

fn is_zero(n: &u64) -> bool {
    *n == 0
}

impl MigrationReport {
    fn new(technique: Technique, dry_run: bool) -> Self {
        Self {
            technique,
            dry_run,
            streams: Vec::new(),
            events_read: 0,
            defaults_filled: 0,
            target_store: None,
            conforms: None,
        }
    }

    pub fn mutations(&self) -> u64 {
        self.streams.iter().map(StreamReport::mutations).sum()
    }

    pub fn stream(&self, id: &str) -> Option<&StreamReport> {
        self.streams.iter().find(|s| s.stream == id)
    }

    /// One summary object, then one object per stream.
    pub fn to_json_lines(&self) -> Vec<Value> {
        let mut summary = serde_json::to_value(self).expect("report serializes");
        let obj = summary.as_object_mut().expect("object");
        obj.remove("streams");
        obj.insert("mutations".into(), json!(self.mutations()));
        let mut lines = vec![tagged("migration_report", summary)];
        for s in &self.streams {
            lines.push(tagged("stream_report", serde_json::to_value(s).expect("report serializes")));
        }
        lines
    }
}

fn tagged(kind: &str, value: Value) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("kind".into(), json!(kind));
    if let Value::Object(fields) = value {
        obj.extend(fields);
    }
    Value::Object(obj)
}

fn scoped_streams(store: &EventStore, scope: &PlanScope) -> Result<Vec<EventStream>, EvolutionError> {
    match scope {
        PlanScope::All => Ok(store.streams()),
        PlanScope::Streams(ids) => ids.iter().map(|id| Ok(store.stream(id)?)).collect(),
    }
}

/// Positional edits turning `stream` into its upcast form, with counts.
fn plan_edits(stream: &EventStream, chain: &UpcasterChain) -> Result<(Vec<Edit>, StreamReport), EvolutionError> {
    let mut report = StreamReport {
        stream: stream.stream_id.to_string(),
        events_before: stream.entries.len() as u64,
        events_after: 0,
        updated: 0,
        inserted: 0,
        deleted: 0,
        backup: None,
        lineage: Vec::new(),
    };
    let mut edits = Vec::new();
    let mut position = stream.archived + 1;
    for entry in &stream.entries {
        let outs = chain.upcast_event(entry.event.clone()).map_err(|e| EvolutionError::TransformFailure {
            stream: stream.stream_id.to_string(),
            reason: format!("event {}: {e}", entry.sequence),
        })?;
        let mut outs = outs.into_iter();
        let Some(head) = outs.next() else {
            edits.push(Edit::Delete(position));
            report.deleted += 1;
            report.lineage.push((entry.sequence, Vec::new()));
            continue;
        };
        let mut seqs = vec![position];
        if head != entry.event {
            edits.push(Edit::Update(position, head));
            report.updated += 1;
        }
        position += 1;
        for extra in outs {
            edits.push(Edit::Insert(position, extra));
            report.inserted += 1;
            seqs.push(position);
            position += 1;
        }
        report.lineage.push((entry.sequence, seqs));
    }
    report.events_after = position - stream.archived - 1;
    Ok((edits, report))
}

/// In-place transformation: rewrites stored events through the store's
/// mutation operations. Every stream's edits are computed before anything
/// is written; each stream is then rewritten atomically. Under `cut_off` a
/// backup of each changed stream is taken first.
pub fn in_place_transform(
    store: &EventStore,
    plan: &MigrationPlan,
    target_schema: Option<&StoreSchema>,
    dry_run: bool,
) -> Result<MigrationReport, EvolutionError> {
    let policy = store.policy();
    if !policy.permits_mutation() {
        return Err(StoreError::ImmutabilityViolation {
            degree: policy.degree(),
            operation: "in-place transformation".into(),
            reason: None,
        }
        .into());
    }
    let chain = plan.upcasters();
    let mut work = Vec::new();
    for stream in scoped_streams(store, &plan.scope)? {
        let (edits, report) = plan_edits(&stream, &chain)?;
        work.push((stream, edits, report));
    }
    let mut report = MigrationReport::new(Technique::InPlace, dry_run);
    for (stream, edits, mut sr) in work {
        report.events_read += stream.entries.len() as u64;
        if !dry_run && !edits.is_empty() {
            let backup = if policy.backup_required() {
                Some(store.backup_stream(&stream.stream_id)?)
            } else {
                None
            };
            store
                .apply_edits(&stream.stream_id, Some(stream.len()), backup.as_ref(), edits)
                .map_err(|e| EvolutionError::TransformFailure {
                    stream: stream.stream_id.to_string(),
                    reason: format!("{e} (streams before it in id order are migrated)"),
                })?;
            sr.backup = backup;
        }
        report.streams.push(sr);
    }
    if let Some(schema) = target_schema {
        if dry_run {
            let mut projected = Vec::new();
            for s in store.streams() {
                if plan.scope.includes(&s.stream_id) {
                    let entries = chain.upcast_stream(&s.entries)?;
                    projected.push(EventStream { entries, ..s });
                } else {
                    projected.push(s);
                }
            }
            report.conforms = Some(conforms_streams(&projected, schema)?.conforms());
        } else {
            let ok = conforms_store(store, schema)?.conforms();
            report.conforms = Some(ok);
            if ok {
                store.bind_schema(schema.clone())?;
            }
        }
    }
    Ok(report)
}

/// Where [`copy_transform`] writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CopyTarget {
    Memory { store_id: String },
    Disk { root: PathBuf, store_id: String },
}

impl CopyTarget {
    pub fn store_id(&self) -> &str {
        match self {
            CopyTarget::Memory { store_id } | CopyTarget::Disk { store_id, .. } => store_id,
        }
    }
}

/// Copy and transform: writes the transformed streams into a new store and
/// leaves the source as it was. Appends to the source are paused for the
/// duration of the copy. On failure the partial target is discarded.
pub fn copy_transform(
    source: &EventStore,
    plan: &MigrationPlan,
    target: &CopyTarget,
    target_schema: Option<&StoreSchema>,
    dry_run: bool,
) -> Result<(Option<EventStore>, MigrationReport), EvolutionError> {
    if target.store_id() == source.store_id() {
        return Err(EvolutionError::TargetExists(target.store_id().to_string()));
    }
    if let CopyTarget::Disk { root, .. } = target {
        if root.join(format::manifest::MANIFEST_FILE).exists() || source.root().as_deref() == Some(root.as_path()) {
            return Err(EvolutionError::TargetExists(root.display().to_string()));
        }
    }
    let chain = plan.upcasters();
    let mut report = MigrationReport::new(Technique::CopyTransform, dry_run);
    report.target_store = Some(match target {
        CopyTarget::Memory { store_id } => store_id.clone(),
        CopyTarget::Disk { root, .. } => root.display().to_string(),
    });

    let _pause = source.pause_appends();
    let mut copies = Vec::new();
    for stream in source.streams() {
        let (entries, lineage) = if plan.scope.includes(&stream.stream_id) {
            let renumbered: Vec<_> = stream
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| crate::event::SequencedEvent::new(i as u64 + 1, e.event.clone()))
                .collect();
            let (view, lineage) =
                chain
                    .upcast_with_lineage(&renumbered)
                    .map_err(|e| EvolutionError::TransformFailure {
                        stream: stream.stream_id.to_string(),
                        reason: e.to_string(),
                    })?;
            let lineage = lineage
                .into_iter()
                .zip(&stream.entries)
                .map(|((_, new), old)| (old.sequence, new))
                .collect();
            (view, lineage)
        } else {
            let entries: Vec<_> = stream
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| crate::event::SequencedEvent::new(i as u64 + 1, e.event.clone()))
                .collect();
            let lineage = stream
                .entries
                .iter()
                .zip(&entries)
                .map(|(o, n)| (o.sequence, vec![n.sequence]))
                .collect();
            (entries, lineage)
        };
        report.events_read += stream.entries.len() as u64;
        report.streams.push(StreamReport {
            stream: stream.stream_id.to_string(),
            events_before: stream.entries.len() as u64,
            events_after: entries.len() as u64,
            updated: 0,
            inserted: 0,
            deleted: 0,
            backup: None,
            lineage,
        });
        copies.push((stream.stream_id, stream.stream_type, entries));
    }
    if dry_run {
        if let Some(schema) = target_schema {
            let streams: Vec<EventStream> = copies
                .iter()
                .map(|(id, t, entries)| EventStream {
                    stream_id: id.clone(),
                    stream_type: t.clone(),
                    archived: 0,
                    entries: entries.clone(),
                })
                .collect();
            report.conforms = Some(conforms_streams(&streams, schema)?.conforms());
        }
        return Ok((None, report));
    }

    let discard = |reason: String| {
        if let CopyTarget::Disk { root, .. } = target {
            let _ = std::fs::remove_dir_all(root);
        }
        EvolutionError::TransformFailure {
            stream: String::new(),
            reason,
        }
    };
    let created = match target {
        CopyTarget::Memory { store_id } => Ok(EventStore::in_memory(store_id.clone(), source.policy())),
        CopyTarget::Disk { root, store_id } => EventStore::create(root, store_id.clone(), source.policy()),
    };
    let new_store = created.map_err(|e| match e {
        StoreError::StoreExists(p) => EvolutionError::TargetExists(p),
        other => discard(format!("creating target: {other}")),
    })?;
    for (id, stream_type, entries) in copies {
        let written = new_store
            .create_stream_typed(&id, stream_type.as_deref())
            .and_then(|_| {
                if entries.is_empty() {
                    Ok(Vec::new())
                } else {
                    new_store.append(&id, 1, entries.into_iter().map(|e| e.event).collect())
                }
            });
        if let Err(e) = written {
            drop(new_store);
            return Err(discard(format!("stream {id}: {e}")));
        }
    }
    if let Some(schema) = target_schema {
        let ok = conforms_store(&new_store, schema)?.conforms();
        report.conforms = Some(ok);
        new_store.bind_schema(schema.clone())?;
    }
    Ok((Some(new_store), report))
}

/// Moves events before `before_sequence` to cold storage.
pub fn archive_cold(store: &EventStore, stream: &StreamId, before_sequence: u64) -> Result<String, EvolutionError> {
    Ok(store.archive_cold(stream, before_sequence)?)
}

/// Inputs to [`migrate`] beyond the plan itself.
#[derive(Debug, Clone, Default)]
pub struct MigrationContext {
    /// Defaults to the store's bound schema.
    pub source_schema: Option<StoreSchema>,
    pub target_schema: Option<StoreSchema>,
    pub copy_target: Option<CopyTarget>,
    pub dry_run: bool,
}

pub struct MigrationOutcome {
    pub report: MigrationReport,
    /// The new store written by copy and transform.
    pub target: Option<EventStore>,
}

/// Runs a plan with the technique it names.
pub fn migrate(store: &EventStore, plan: &MigrationPlan, ctx: MigrationContext) -> Result<MigrationOutcome, EvolutionError> {
    let source_schema = ctx.source_schema.or_else(|| store.bound_schema());
    plan.validate(source_schema.as_ref(), ctx.target_schema.as_ref())?;
    let need_target = || {
        ctx.target_schema
            .clone()
            .ok_or_else(|| EvolutionError::InvalidPlan(format!("technique {} needs a target schema", plan.technique)))
    };
    let done = |report| Ok(MigrationOutcome { report, target: None });
    match plan.technique {
        Technique::VersionedEvents => {
            let target = need_target()?;
            let source = source_schema
                .ok_or_else(|| EvolutionError::InvalidPlan("versioned_events needs a source schema".into()))?;
            if let Compatibility::Incompatible(reason) = check_versioned_events(&source, &target) {
                return Err(EvolutionError::Incompatible(reason));
            }
            let mut report = MigrationReport::new(plan.technique, ctx.dry_run);
            report.conforms = Some(true);
            if !ctx.dry_run {
                store.bind_schema(target)?;
            }
            done(report)
        }
        Technique::WeakSchema => {
            let target = need_target()?;
            let mut report = MigrationReport::new(plan.technique, ctx.dry_run);
            let mut problems = Vec::new();
            for stream in scoped_streams(store, &plan.scope)? {
                let stream_schema = stream.stream_type.as_deref().and_then(|t| target.stream_schema(t));
                for entry in &stream.entries {
                    report.events_read += 1;
                    let e = &entry.event;
                    let schema = stream_schema.and_then(|ss| {
                        ss.event_schema(e.event_type.as_str(), e.schema_version).or_else(|| {
                            ss.event_schemas
                                .iter()
                                .filter(|s| s.event_type == e.event_type.as_str())
                                .max_by_key(|s| s.version)
                        })
                    });
                    let Some(schema) = schema else {
                        problems.push(format!("{}#{}: no schema for {}", stream.stream_id, entry.sequence, e.event_type));
                        continue;
                    };
                    match weak_read_event(e.clone(), schema) {
                        Ok((_, filled)) => report.defaults_filled += filled,
                        Err(EvolutionError::ToleranceExceeded(p)) => {
                            problems.extend(p.into_iter().map(|m| format!("{}#{}: {m}", stream.stream_id, entry.sequence)))
                        }
                        Err(other) => return Err(other),
                    }
                }
            }
            if !problems.is_empty() {
                return Err(EvolutionError::ToleranceExceeded(problems));
            }
            report.conforms = Some(true);
            if !ctx.dry_run {
                store.bind_schema(target)?;
            }
            done(report)
        }
        Technique::Upcast => {
            let chain = plan.upcasters();
            let mut report = MigrationReport::new(plan.technique, true);
            let mut conforms = true;
            for stream in scoped_streams(store, &plan.scope)? {
                let view = chain.upcast_stream(&stream.entries)?;
                report.events_read += stream.entries.len() as u64;
                if let Some(target) = &ctx.target_schema {
                    let ss = stream.stream_type.as_deref().and_then(|t| target.stream_schema(t));
                    conforms &= ss.is_some_and(|ss| conforms_entries(stream.stream_id.as_str(), &view, ss).conforms());
                }
                report.streams.push(StreamReport {
                    stream: stream.stream_id.to_string(),
                    events_before: stream.entries.len() as u64,
                    events_after: view.len() as u64,
                    updated: 0,
                    inserted: 0,
                    deleted: 0,
                    backup: None,
                    lineage: Vec::new(),
                });
            }
            if ctx.target_schema.is_some() {
                report.conforms = Some(conforms);
            }
            done(report)
        }
        Technique::InPlace => done(in_place_transform(store, plan, ctx.target_schema.as_ref(), ctx.dry_run)?),
        Technique::CopyTransform => {
            let target = ctx
                .copy_target
                .as_ref()
                .ok_or_else(|| EvolutionError::InvalidPlan("copy_transform needs a target store".into()))?;
            let (target, report) = copy_transform(store, plan, target, ctx.target_schema.as_ref(), ctx.dry_run)?;
            Ok(MigrationOutcome { report, target })
        }
    }
}
