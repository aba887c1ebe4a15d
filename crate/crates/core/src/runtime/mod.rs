//! The command/query runtime.
//!
//! Commands are routed to an aggregate by command type. The aggregate reads
//! its stream (resuming from a snapshot if one is still valid), folds it,
//! runs the accept rule and appends the resulting events with the sequence
//! it observed. Queries are routed to projectors by name. A projector runs
//! in one of three modes:
//!
//! * `on_demand` projections are folded from the store for each query;
//! * `synchronous` projections are updated while the appending stream is
//!   still locked, so a query never sees the store ahead of them;
//! * `pre_built` projections consume queued append notifications only when
//!   [`System::deliver`] or [`System::quiesce`] is called. Until then a
//!   query answers from an older state and reports its checkpoint.
//!
//! Any insert, update or delete on a stream a projection has consumed makes
//! that projection invalid; queries then fail until it is rebuilt.

mod projection;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{RuntimeError, StoreError};
use crate::event::{Event, SequencedEvent, StreamId};
use crate::store::EventStore;

pub use projection::{
    accept, load_from_snapshot, project, project_checked, AcceptFn, AggregateDefinition, AggregateInstance,
    AnswerFn, Command, FoldFn, Partitioning, Projection, ProjectionMode, ProjectorDefinition, Rejection,
    Snapshot, StreamSelector,
};
use projection::{apply, fold_sources, Source};

/// What became of a command.
#[derive(Debug, Clone, PartialEq)]
pub enum CommandOutcome {
    Appended(Vec<SequencedEvent>),
    Rejected(Rejection),
    /// Another writer appended first; nothing was written.
    Conflict { expected: u64, supplied: u64 },
}

impl CommandOutcome {
    pub fn is_appended(&self) -> bool {
        matches!(self, CommandOutcome::Appended(_))
    }

    pub fn to_json(&self) -> Value {
        match self {
            CommandOutcome::Appended(events) => serde_json::json!({
                "outcome": "appended",
                "sequences": events.iter().map(|e| e.sequence).collect::<Vec<_>>(),
            }),
            CommandOutcome::Rejected(r) => serde_json::json!({
                "outcome": "rejected",
                "code": r.code,
                "message": r.message,
            }),
            CommandOutcome::Conflict { expected, supplied } => serde_json::json!({
                "outcome": "conflict",
                "expected": expected,
                "supplied": supplied,
            }),
        }
    }
}

/// A command that has been decided but not yet appended.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub command: Command,
    pub aggregate: String,
    /// Sequence the append will supply.
    pub expected: u64,
    pub decision: Result<Vec<Event>, Rejection>,
    instance: AggregateInstance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub name: String,
    pub params: Value,
}

impl Query {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Value::Null,
        }
    }

    pub fn with_params(mut self, params: Value) -> Self {
        self.params = params;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub projector: String,
    pub mode: ProjectionMode,
    pub result: Value,
    /// Position the answer reflects, so callers can tell how stale it is.
    pub checkpoint: BTreeMap<StreamId, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RebuildScope {
    All,
    Streams(Vec<StreamId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RebuildReport {
    pub projector: String,
    pub streams: usize,
    pub events: u64,
    pub duration: Duration,
    pub projection: Projection,
}

struct Slot {
    def: ProjectorDefinition,
    state: Mutex<SlotState>,
}

struct SlotState {
    projection: Projection,
    pending: VecDeque<(StreamId, u64)>,
    /// Journal records already examined for invalidation.
    journal_seen: usize,
    last_rebuild: Option<RebuildReport>,
}

pub struct SystemBuilder {
    store: Arc<EventStore>,
    aggregates: Vec<AggregateDefinition>,
    projectors: Vec<ProjectorDefinition>,
}

impl SystemBuilder {
    pub fn aggregate(mut self, def: AggregateDefinition) -> Self {
        self.aggregates.push(def);
        self
    }

    pub fn projector(mut self, def: ProjectorDefinition) -> Self {
        self.projectors.push(def);
        self
    }

    pub fn build(self) -> Result<System, RuntimeError> {
        let mut routes = HashMap::new();
        let mut aggregates = BTreeMap::new();
        for def in self.aggregates {
            let def = Arc::new(def);
            for t in &def.command_types {
                if routes.insert(t.clone(), def.clone()).is_some() {
                    return Err(RuntimeError::DuplicateRegistration(t.clone()));
                }
            }
            if aggregates.insert(def.name.clone(), def.clone()).is_some() {
                return Err(RuntimeError::DuplicateRegistration(def.name.clone()));
            }
        }
        let mut projectors = BTreeMap::new();
        for def in self.projectors {
            let name = def.name.clone();
            let slot = Slot {
                state: Mutex::new(SlotState {
                    projection: def.empty_projection(),
                    pending: VecDeque::new(),
                    journal_seen: self.store.journal_len(),
                    last_rebuild: None,
                }),
                def,
            };
            if projectors.insert(name.clone(), Arc::new(slot)).is_some() {
                return Err(RuntimeError::DuplicateRegistration(name));
            }
        }
        let system = System {
            store: self.store,
            routes,
            aggregates,
            projectors,
            snapshots: Mutex::new(HashMap::new()),
        };
        for slot in system.projectors.values() {
            match slot.def.mode {
                ProjectionMode::Synchronous => {
                    let mut st = slot.state.lock().unwrap();
                    system.rebuild_locked(slot, &mut st, &RebuildScope::All)?;
                }
                ProjectionMode::PreBuilt => {
                    let mut st = slot.state.lock().unwrap();
                    for id in system.selected_streams(&slot.def) {
                        let len = system.store.stream_len(&id)?;
                        if len > 0 {
                            st.pending.push_back((id, len));
                        }
                    }
                }
                ProjectionMode::OnDemand => {}
            }
        }
        Ok(system)
    }
}

/// An event-sourced system: aggregates and projectors over one store.
pub struct System {
    store: Arc<EventStore>,
    routes: HashMap<String, Arc<AggregateDefinition>>,
    aggregates: BTreeMap<String, Arc<AggregateDefinition>>,
    projectors: BTreeMap<String, Arc<Slot>>,
    snapshots: Mutex<HashMap<(String, StreamId), Snapshot>>,
}

impl System {
    pub fn builder(store: Arc<EventStore>) -> SystemBuilder {
        SystemBuilder {
            store,
            aggregates: Vec::new(),
            projectors: Vec::new(),
        }
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    pub fn projector_names(&self) -> Vec<String> {
        self.projectors.keys().cloned().collect()
    }

    /// True if some aggregate handles `command_type`.
    pub fn handles(&self, command_type: &str) -> bool {
        self.routes.contains_key(command_type)
    }

    pub fn projector_mode(&self, name: &str) -> Result<ProjectionMode, RuntimeError> {
        Ok(self.slot(name)?.def.mode)
    }

    fn slot(&self, name: &str) -> Result<&Arc<Slot>, RuntimeError> {
        self.projectors
            .get(name)
            .ok_or_else(|| RuntimeError::UnknownProjector(name.to_string()))
    }

    fn selected_streams(&self, def: &ProjectorDefinition) -> Vec<StreamId> {
        self.store
            .stream_ids()
            .into_iter()
            .filter(|id| self.selects(def, id))
            .collect()
    }

    fn selects(&self, def: &ProjectorDefinition, id: &StreamId) -> bool {
        match &def.selector {
            StreamSelector::StreamType(_) => def.selector.matches(id, self.store.stream_type(id).as_deref()),
            other => other.matches(id, None),
        }
    }

    // -- write side ----------------------------------------------------------

    /// Reads, folds and decides a command without writing anything.
    pub fn prepare_command(&self, command: &Command) -> Result<Prepared, RuntimeError> {
        let def = self
            .routes
            .get(&command.command_type)
            .ok_or_else(|| RuntimeError::UnknownCommandType(command.command_type.clone()))?;
        let stream = &command.target_stream;
        let mut instance = match self.usable_snapshot(&def.name, stream) {
            Some(snap) => load_from_snapshot(def, &snap, &[]),
            None => def.instance(stream, &[]),
        };
        let mut observed = instance.sequence;
        if self.store.contains_stream(stream) {
            let from = instance.sequence + 1;
            self.store.with_entries(stream, from, |entries| instance.fold(def, entries))?;
            observed = instance.sequence;
            if observed == 0 {
                // nothing live: the stream is empty or fully archived
                observed = self.store.stream_len(stream)?;
            }
        }
        let expected = command.expected_sequence.unwrap_or(observed + 1);
        let decision = accept(&instance.projection(), command, &def.accept);
        Ok(Prepared {
            command: command.clone(),
            aggregate: def.name.clone(),
            expected,
            decision,
            instance,
        })
    }

    /// Appends a prepared decision. The append carries the sequence observed
    /// at preparation time, so a write in between turns into a conflict.
    pub fn commit_prepared(&self, prepared: Prepared) -> Result<CommandOutcome, RuntimeError> {
        let events = match prepared.decision {
            Err(rejection) => return Ok(CommandOutcome::Rejected(rejection)),
            Ok(events) if events.is_empty() => return Ok(CommandOutcome::Appended(Vec::new())),
            Ok(events) => events,
        };
        let def = self.aggregates[&prepared.aggregate].clone();
        let stream = prepared.command.target_stream.clone();
        self.store.ensure_stream(&stream, def.stream_type.as_deref())?;

        let sync: Vec<&Arc<Slot>> = self
            .projectors
            .values()
            .filter(|s| s.def.mode == ProjectionMode::Synchronous && self.selects(&s.def, &stream))
            .collect();
        let mut guards: Vec<MutexGuard<'_, SlotState>> = sync.iter().map(|s| s.state.lock().unwrap()).collect();
        let stream_type = self.store.stream_type(&stream);
        let schema = self.store.bound_schema();

        let result = self.store.append_with(&stream, prepared.expected, events, |appended| {
            let mut lagging = Vec::new();
            for (slot, st) in sync.iter().zip(guards.iter_mut()) {
                let contiguous = st.projection.checkpoint_of(&stream) + 1 == appended[0].sequence;
                if !contiguous || !st.projection.valid {
                    lagging.push(slot.def.name.clone());
                    continue;
                }
                for e in appended {
                    if apply(&mut st.projection, &slot.def, &stream, stream_type.as_deref(), e, schema.as_ref())
                        .is_err()
                    {
                        lagging.push(slot.def.name.clone());
                        break;
                    }
                }
            }
            lagging
        });
        let (appended, lagging) = match result {
            Ok(r) => r,
            Err(StoreError::ConcurrencyConflict { expected, supplied, .. }) => {
                return Ok(CommandOutcome::Conflict { expected, supplied })
            }
            Err(e) => return Err(e.into()),
        };
        for (slot, st) in sync.iter().zip(guards.iter_mut()) {
            if lagging.contains(&slot.def.name) {
                self.catch_up(slot, st, &stream)?;
            }
        }
        drop(guards);

        let last = appended.last().map(|e| e.sequence).unwrap_or(0);
        for slot in self.projectors.values() {
            if slot.def.mode == ProjectionMode::PreBuilt && self.selects(&slot.def, &stream) {
                slot.state.lock().unwrap().pending.push_back((stream.clone(), last));
            }
        }
        if let Some(interval) = def.snapshot_interval {
            let before = appended[0].sequence - 1;
            if before / interval != last / interval {
                let mut inst = prepared.instance;
                inst.fold(&def, &appended);
                let snap = inst.snapshot(self.store.journal_len());
                self.snapshots
                    .lock()
                    .unwrap()
                    .insert((def.name.clone(), stream.clone()), snap);
            }
        }
        Ok(CommandOutcome::Appended(appended))
    }

    /// Read, fold, accept, append. A conflict is reported, never retried.
    pub fn handle_command(&self, command: &Command) -> Result<CommandOutcome, RuntimeError> {
        let prepared = self.prepare_command(command)?;
        self.commit_prepared(prepared)
    }

    /// Takes a snapshot of an aggregate instance now.
    pub fn snapshot(&self, aggregate: &str, stream: &StreamId) -> Result<Snapshot, RuntimeError> {
        let def = self
            .aggregates
            .get(aggregate)
            .ok_or_else(|| RuntimeError::UnknownCommandType(aggregate.to_string()))?;
        let mark = self.store.journal_len();
        let inst = self.store.with_entries(stream, 1, |entries| def.instance(stream, entries))?;
        let snap = inst.snapshot(mark);
        self.snapshots
            .lock()
            .unwrap()
            .insert((aggregate.to_string(), stream.clone()), snap.clone());
        Ok(snap)
    }

    /// The stored snapshot for an aggregate instance, unless a later
    /// mutation rewrote the range it covers.
    pub fn usable_snapshot(&self, aggregate: &str, stream: &StreamId) -> Option<Snapshot> {
        let mut snapshots = self.snapshots.lock().unwrap();
        let key = (aggregate.to_string(), stream.clone());
        let snap = snapshots.get(&key)?;
        if snap.voided_by(&self.store.journal_since(snap.journal_mark)) {
            snapshots.remove(&key);
            return None;
        }
        Some(snap.clone())
    }

    // -- read side -----------------------------------------------------------

    pub fn handle_query(&self, query: &Query) -> Result<QueryResult, RuntimeError> {
        let slot = self
            .projectors
            .get(&query.name)
            .ok_or_else(|| RuntimeError::UnknownQuery(query.name.clone()))?;
        let def = &slot.def;
        let projection = match def.mode {
            ProjectionMode::OnDemand => self.build_now(def)?,
            ProjectionMode::PreBuilt | ProjectionMode::Synchronous => {
                let mut st = slot.state.lock().unwrap();
                self.absorb_journal(&mut st);
                if !st.projection.valid {
                    return Err(invalid(def, &st.projection));
                }
                st.projection.clone()
            }
        };
        Ok(QueryResult {
            projector: def.name.clone(),
            mode: def.mode,
            result: def.respond(&projection.state, &query.params),
            checkpoint: projection.checkpoint,
        })
    }

    /// Current projection of a projector; on-demand projectors are built now.
    pub fn projection(&self, name: &str) -> Result<Projection, RuntimeError> {
        let slot = self.slot(name)?;
        if slot.def.mode == ProjectionMode::OnDemand {
            return self.build_now(&slot.def);
        }
        let mut st = slot.state.lock().unwrap();
        self.absorb_journal(&mut st);
        Ok(st.projection.clone())
    }

    fn build_now(&self, def: &ProjectorDefinition) -> Result<Projection, RuntimeError> {
        let mut projection = def.empty_projection();
        self.fold_store(def, &mut projection, &self.selected_streams(def))?;
        Ok(projection)
    }

    /// Folds the live entries of `ids` into `projection` past its checkpoint.
    fn fold_store(
        &self,
        def: &ProjectorDefinition,
        projection: &mut Projection,
        ids: &[StreamId],
    ) -> Result<u64, RuntimeError> {
        let types: Vec<Option<String>> = ids.iter().map(|id| self.store.stream_type(id)).collect();
        let type_of: HashMap<&StreamId, Option<&str>> =
            ids.iter().zip(&types).map(|(id, t)| (id, t.as_deref())).collect();
        let schema = if def.strict { self.store.bound_schema() } else { None };
        self.store.with_streams(ids, |views| {
            let mut sources: Vec<Source<'_>> = views
                .iter()
                .map(|(id, entries)| Source {
                    id,
                    stream_type: type_of.get(id).copied().flatten(),
                    entries,
                })
                .collect();
            fold_sources(projection, def, &mut sources, schema.as_ref())
        })
    }

    fn absorb_journal(&self, st: &mut SlotState) {
        let records = self.store.journal_since(st.journal_seen);
        st.journal_seen += records.len();
        for r in &records {
            st.projection.absorb(r);
        }
    }

    fn catch_up(&self, slot: &Slot, st: &mut SlotState, stream: &StreamId) -> Result<(), RuntimeError> {
        if st.projection.invalid_streams.contains(stream) {
            return Ok(());
        }
        self.fold_store(&slot.def, &mut st.projection, std::slice::from_ref(stream))?;
        Ok(())
    }

    /// Delivers up to `k` queued notifications to a pre-built projector.
    /// Returns how many were delivered.
    pub fn deliver(&self, name: &str, k: usize) -> Result<usize, RuntimeError> {
        let slot = self.slot(name)?;
        let mut st = slot.state.lock().unwrap();
        self.absorb_journal(&mut st);
        let mut delivered = 0;
        while delivered < k {
            let Some((stream, up_to)) = st.pending.pop_front() else { break };
            delivered += 1;
            if st.projection.invalid_streams.contains(&stream) {
                continue;
            }
            let from = st.projection.checkpoint_of(&stream) + 1;
            if from > up_to {
                continue;
            }
            let stream_type = self.store.stream_type(&stream);
            let schema = if slot.def.strict { self.store.bound_schema() } else { None };
            let entries = match self.store.read(&stream, from) {
                Ok(entries) => entries,
                Err(StoreError::UnknownStream(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            for e in entries.iter().take_while(|e| e.sequence <= up_to) {
                apply(&mut st.projection, &slot.def, &stream, stream_type.as_deref(), e, schema.as_ref())?;
            }
        }
        Ok(delivered)
    }

    /// Notifications waiting for a projector.
    pub fn pending(&self, name: &str) -> Result<usize, RuntimeError> {
        Ok(self.slot(name)?.state.lock().unwrap().pending.len())
    }

    /// Delivers every queued notification to every pre-built projector.
    pub fn quiesce(&self) -> Result<usize, RuntimeError> {
        let mut total = 0;
        for (name, slot) in &self.projectors {
            if slot.def.mode == ProjectionMode::PreBuilt {
                total += self.deliver(name, usize::MAX)?;
            }
        }
        Ok(total)
    }

    /// Inconsistency window: events in the projector's streams that its
    /// projection has not yet incorporated. Zero for on-demand projectors.
    pub fn window(&self, name: &str) -> Result<u64, RuntimeError> {
        let slot = self.slot(name)?;
        if slot.def.mode == ProjectionMode::OnDemand {
            return Ok(0);
        }
        let st = slot.state.lock().unwrap();
        let mut window = 0;
        for id in self.selected_streams(&slot.def) {
            let len = self.store.stream_len(&id)?;
            window += len.saturating_sub(st.projection.checkpoint_of(&id));
        }
        Ok(window)
    }

    /// Recomputes a projection from the start of the live streams in scope.
    pub fn rebuild(&self, name: &str, scope: RebuildScope) -> Result<RebuildReport, RuntimeError> {
        let slot = self.slot(name)?;
        let mut st = slot.state.lock().unwrap();
        self.rebuild_locked(slot, &mut st, &scope)
    }

    pub fn last_rebuild(&self, name: &str) -> Result<Option<RebuildReport>, RuntimeError> {
        Ok(self.slot(name)?.state.lock().unwrap().last_rebuild.clone())
    }

    fn rebuild_locked(&self, slot: &Slot, st: &mut SlotState, scope: &RebuildScope) -> Result<RebuildReport, RuntimeError> {
        let def = &slot.def;
        let started = Instant::now();
        let mark = self.store.journal_len();
        let (projection, streams, events) = match scope {
            RebuildScope::All => {
                let ids = self.selected_streams(def);
                let mut projection = def.empty_projection();
                let events = self.fold_store(def, &mut projection, &ids)?;
                st.pending.clear();
                (projection, ids.len(), events)
            }
            RebuildScope::Streams(targets) => {
                if def.partitioning != Partitioning::PerStream {
                    return Err(RuntimeError::TargetedRebuildUnsupported(def.name.clone()));
                }
                self.absorb_journal(st);
                let targets: BTreeSet<StreamId> = targets.iter().filter(|id| self.selects(def, id)).cloned().collect();
                let mut projection = st.projection.clone();
                if let Some(map) = projection.state.as_object_mut() {
                    for id in &targets {
                        map.remove(id.as_str());
                    }
                }
                for id in &targets {
                    projection.checkpoint.remove(id);
                    projection.invalid_streams.remove(id);
                }
                let ids: Vec<StreamId> = targets.into_iter().collect();
                let events = self.fold_store(def, &mut projection, &ids)?;
                projection.valid = projection.invalid_streams.is_empty();
                (projection, ids.len(), events)
            }
        };
        st.projection = projection;
        if matches!(scope, RebuildScope::All) {
            st.journal_seen = mark;
        }
        let report = RebuildReport {
            projector: def.name.clone(),
            streams,
            events,
            duration: started.elapsed(),
            projection: st.projection.clone(),
        };
        st.last_rebuild = Some(report.clone());
        Ok(report)
    }
}

fn invalid(def: &ProjectorDefinition, projection: &Projection) -> RuntimeError {
    RuntimeError::InvalidProjection {
        projector: def.name.clone(),
        streams: projection.invalid_streams.iter().map(|s| s.to_string()).collect(),
    }
}
