//! Pure folding: projectors, the cross-stream merge rule, aggregate
//! instances and snapshots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::RuntimeError;
use crate::event::{Event, Payload, SequencedEvent, StreamId};
use crate::schema::{conforms_event, StoreSchema};
use crate::store::{EventStream, MutationRecord};

/// Fold step: updates the state with one event of one stream.
pub type FoldFn = Arc<dyn Fn(&mut Value, &StreamId, &SequencedEvent) + Send + Sync>;

/// Accept rule: decides a command against the current aggregate state.
pub type AcceptFn = Arc<dyn Fn(&Value, &Command) -> Result<Vec<Event>, Rejection> + Send + Sync>;

/// Answers a query from a projection state and the query parameters.
pub type AnswerFn = Arc<dyn Fn(&Value, &Value) -> Value + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub command_type: String,
    pub target_stream: StreamId,
    /// Sequence the first new event must receive; `None` takes whatever
    /// the aggregate observed when it read the stream.
    pub expected_sequence: Option<u64>,
    pub payload: Payload,
}

impl Command {
    pub fn new(command_type: impl Into<String>, target_stream: StreamId, payload: Payload) -> Self {
        Self {
            command_type: command_type.into(),
            target_stream,
            expected_sequence: None,
            payload,
        }
    }

    pub fn expecting(mut self, sequence: u64) -> Self {
        self.expected_sequence = Some(sequence);
        self
    }
}

/// A domain-level refusal of a command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub code: String,
    pub message: String,
}

impl Rejection {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Built from the store for every query.
    OnDemand,
    /// Maintained in the background from append notifications; queries may
    /// see an older state.
    PreBuilt,
    /// Updated in the same step as the append that produced the events.
    Synchronous,
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionMode::OnDemand => "on_demand",
            ProjectionMode::PreBuilt => "pre_built",
            ProjectionMode::Synchronous => "synchronous",
        })
    }
}

/// Which streams a projector reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamSelector {
    All,
    Streams(BTreeSet<StreamId>),
    StreamType(String),
}

impl StreamSelector {
    pub fn matches(&self, stream: &StreamId, stream_type: Option<&str>) -> bool {
        match self {
            StreamSelector::All => true,
            StreamSelector::Streams(set) => set.contains(stream),
            StreamSelector::StreamType(t) => stream_type == Some(t.as_str()),
        }
    }
}

/// How a projector's state relates to its source streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partitioning {
    /// One state folded over all selected streams.
    Whole,
    /// A JSON object with one independently folded state per stream id,
    /// which is what makes targeted rebuilds possible.
    PerStream,
}

#[derive(Clone)]
pub struct ProjectorDefinition {
    pub name: String,
    pub selector: StreamSelector,
    pub initial: Value,
    pub fold: FoldFn,
    pub mode: ProjectionMode,
    pub partitioning: Partitioning,
    /// Fail with `NonConformingEvent` instead of folding events that do not
    /// match the bound schema.
    pub strict: bool,
    pub answer: Option<AnswerFn>,
}

impl fmt::Debug for ProjectorDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProjectorDefinition")
            .field("name", &self.name)
            .field("selector", &self.selector)
            .field("mode", &self.mode)
            .field("partitioning", &self.partitioning)
            .field("strict", &self.strict)
            .finish_non_exhaustive()
    }
}

impl ProjectorDefinition {
    pub fn new(
        name: impl Into<String>,
        initial: Value,
        fold: impl Fn(&mut Value, &StreamId, &SequencedEvent) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            selector: StreamSelector::All,
            initial,
            fold: Arc::new(fold),
            mode: ProjectionMode::OnDemand,
            partitioning: Partitioning::Whole,
            strict: false,
            answer: None,
        }
    }

    pub fn mode(mut self, mode: ProjectionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn selector(mut self, selector: StreamSelector) -> Self {
        self.selector = selector;
        self
    }

    pub fn per_stream(mut self) -> Self {
        self.partitioning = Partitioning::PerStream;
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn answer(mut self, answer: impl Fn(&Value, &Value) -> Value + Send + Sync + 'static) -> Self {
        self.answer = Some(Arc::new(answer));
        self
    }

    pub fn empty_projection(&self) -> Projection {
        let state = match self.partitioning {
            Partitioning::Whole => self.initial.clone(),
            Partitioning::PerStream => Value::Object(Default::default()),
        };
        Projection {
            projection_id: self.name.clone(),
            state,
            checkpoint: BTreeMap::new(),
            valid: true,
            invalid_streams: BTreeSet::new(),
        }
    }

    pub(crate) fn respond(&self, state: &Value, params: &Value) -> Value {
        match &self.answer {
            Some(answer) => answer(state, params),
            None => state.clone(),
        }
    }
}

/// A folded model together with the position it reflects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub projection_id: String,
    pub state: Value,
    /// Last processed sequence per stream.
    pub checkpoint: BTreeMap<StreamId, u64>,
    /// False once a stream in the checkpoint has had its history rewritten.
    pub valid: bool,
    /// Streams whose rewrite made the projection invalid.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub invalid_streams: BTreeSet<StreamId>,
}

impl Projection {
    pub fn checkpoint_of(&self, stream: &StreamId) -> u64 {
        self.checkpoint.get(stream).copied().unwrap_or(0)
    }

    /// Marks the projection invalid if `record` rewrote a stream it has
    /// consumed. Returns whether it did.
    pub fn absorb(&mut self, record: &MutationRecord) -> bool {
        if !record.kind.rewrites_history() {
            return false;
        }
        let hit = self.checkpoint.keys().find(|s| s.as_str() == record.stream).cloned();
        match hit {
            Some(stream) => {
                self.invalid_streams.insert(stream);
                self.valid = false;
                true
            }
            None => false,
        }
    }
}

/// A stream slice handed to the folding machinery.
pub(crate) struct Source<'a> {
    pub id: &'a StreamId,
    pub stream_type: Option<&'a str>,
    pub entries: &'a [SequencedEvent],
}

/// Index of the first entry with a sequence above `checkpoint`.
fn start_index(entries: &[SequencedEvent], checkpoint: u64) -> usize {
    match entries.first() {
        None => 0,
        Some(first) => (checkpoint + 1).saturating_sub(first.sequence).min(entries.len() as u64) as usize,
    }
}

/// Folds every entry past the checkpoint, taking one event from each stream
/// per round in stream-id order. Returns the number of events folded.
pub(crate) fn fold_sources(
    projection: &mut Projection,
    def: &ProjectorDefinition,
    sources: &mut [Source<'_>],
    schema: Option<&StoreSchema>,
) -> Result<u64, RuntimeError> {
    sources.sort_by(|a, b| a.id.cmp(b.id));
    let mut cursors: Vec<usize> = sources
        .iter()
        .map(|s| start_index(s.entries, projection.checkpoint_of(s.id)))
        .collect();
    let mut folded = 0;
    loop {
        let mut progressed = false;
        for (src, cursor) in sources.iter().zip(cursors.iter_mut()) {
            let Some(entry) = src.entries.get(*cursor) else { continue };
            *cursor += 1;
            progressed = true;
            apply(projection, def, src.id, src.stream_type, entry, schema)?;
            folded += 1;
        }
        if !progressed {
            return Ok(folded);
        }
    }
}

pub(crate) fn apply(
    projection: &mut Projection,
    def: &ProjectorDefinition,
    stream: &StreamId,
    stream_type: Option<&str>,
    entry: &SequencedEvent,
    schema: Option<&StoreSchema>,
) -> Result<(), RuntimeError> {
    if def.strict {
        if let Some(schema) = schema {
            check_conformance(stream, stream_type, entry, schema)?;
        }
    }
    match def.partitioning {
        Partitioning::Whole => (def.fold)(&mut projection.state, stream, entry),
        Partitioning::PerStream => {
            if !projection.state.is_object() {
                projection.state = Value::Object(Default::default());
            }
            let map = projection.state.as_object_mut().expect("object state");
            let sub = map
                .entry(stream.as_str().to_string())
                .or_insert_with(|| def.initial.clone());
            (def.fold)(sub, stream, entry);
        }
    }
    projection.checkpoint.insert(stream.clone(), entry.sequence);
    Ok(())
}

fn check_conformance(
    stream: &StreamId,
    stream_type: Option<&str>,
    entry: &SequencedEvent,
    schema: &StoreSchema,
) -> Result<(), RuntimeError> {
    let e = &entry.event;
    let violations = match stream_type.and_then(|t| schema.event_schema(t, e.event_type.as_str(), e.schema_version)) {
        Some(es) => conforms_event(e, es).messages(),
        None => vec![format!("no event schema for type {} v{}", e.event_type, e.schema_version)],
    };
    if violations.is_empty() {
        Ok(())
    } else {
        Err(RuntimeError::NonConformingEvent {
            stream: stream.to_string(),
            sequence: entry.sequence,
            violations,
        })
    }
}

/// Folds `streams` with `def`, continuing from `from` when given. Events
/// of one stream are folded in sequence order; across streams the order is
/// round-robin by stream id.
pub fn project(
    streams: &[EventStream],
    def: &ProjectorDefinition,
    from: Option<&Projection>,
) -> Result<Projection, RuntimeError> {
    project_checked(streams, def, from, None)
}

/// Like [`project`], validating events against `schema` when the projector
/// is strict.
pub fn project_checked(
    streams: &[EventStream],
    def: &ProjectorDefinition,
    from: Option<&Projection>,
    schema: Option<&StoreSchema>,
) -> Result<Projection, RuntimeError> {
    let mut projection = from.cloned().unwrap_or_else(|| def.empty_projection());
    let mut sources: Vec<Source<'_>> = streams
        .iter()
        .map(|s| Source {
            id: &s.stream_id,
            stream_type: s.stream_type.as_deref(),
            entries: &s.entries,
        })
        .collect();
    fold_sources(&mut projection, def, &mut sources, schema)?;
    Ok(projection)
}

/// Runs an accept rule against a projection. Accept is pure: it only
/// decides, it never touches a store.
pub fn accept(projection: &Projection, command: &Command, rule: &AcceptFn) -> Result<Vec<Event>, Rejection> {
    if !projection.valid {
        return Err(Rejection::new(
            "stale_projection",
            format!("projection {} must be rebuilt first", projection.projection_id),
        ));
    }
    rule(&projection.state, command)
}

#[derive(Clone)]
pub struct AggregateDefinition {
    pub name: String,
    pub command_types: Vec<String>,
    /// Stream type assigned to streams the aggregate creates.
    pub stream_type: Option<String>,
    pub initial: Value,
    pub fold: FoldFn,
    pub accept: AcceptFn,
    pub snapshot_interval: Option<u64>,
}

impl fmt::Debug for AggregateDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AggregateDefinition")
            .field("name", &self.name)
            .field("command_types", &self.command_types)
            .field("stream_type", &self.stream_type)
            .field("snapshot_interval", &self.snapshot_interval)
            .finish_non_exhaustive()
    }
}

impl AggregateDefinition {
    pub fn new(
        name: impl Into<String>,
        initial: Value,
        fold: impl Fn(&mut Value, &StreamId, &SequencedEvent) + Send + Sync + 'static,
        accept: impl Fn(&Value, &Command) -> Result<Vec<Event>, Rejection> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            command_types: Vec::new(),
            stream_type: None,
            initial,
            fold: Arc::new(fold),
            accept: Arc::new(accept),
            snapshot_interval: None,
        }
    }

    pub fn handles(mut self, command_type: impl Into<String>) -> Self {
        self.command_types.push(command_type.into());
        self
    }

    pub fn stream_type(mut self, stream_type: impl Into<String>) -> Self {
        self.stream_type = Some(stream_type.into());
        self
    }

    pub fn snapshot_every(mut self, interval: u64) -> Self {
        self.snapshot_interval = Some(interval.max(1));
        self
    }

    /// Folds a stream into a fresh aggregate instance.
    pub fn instance(&self, stream: &StreamId, entries: &[SequencedEvent]) -> AggregateInstance {
        let mut inst = AggregateInstance {
            aggregate: self.name.clone(),
            stream: stream.clone(),
            state: self.initial.clone(),
            sequence: 0,
        };
        inst.fold(self, entries);
        inst
    }
}

/// The write-side state of one aggregate over one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateInstance {
    pub aggregate: String,
    pub stream: StreamId,
    pub state: Value,
    /// Last folded sequence.
    pub sequence: u64,
}

impl AggregateInstance {
    /// Folds the entries past the current sequence.
    pub fn fold(&mut self, def: &AggregateDefinition, entries: &[SequencedEvent]) {
        for e in &entries[start_index(entries, self.sequence)..] {
            (def.fold)(&mut self.state, &self.stream, e);
            self.sequence = e.sequence;
        }
    }

    pub fn projection(&self) -> Projection {
        let mut checkpoint = BTreeMap::new();
        if self.sequence > 0 {
            checkpoint.insert(self.stream.clone(), self.sequence);
        }
        Projection {
            projection_id: format!("{}/{}", self.aggregate, self.stream),
            state: self.state.clone(),
            checkpoint,
            valid: true,
            invalid_streams: BTreeSet::new(),
        }
    }

    /// Captures the instance. `journal_mark` is the mutation journal length
    /// at capture time; later rewrites of the covered range void it.
    pub fn snapshot(&self, journal_mark: usize) -> Snapshot {
        Snapshot {
            aggregate: self.aggregate.clone(),
            stream: self.stream.clone(),
            sequence: self.sequence,
            state: self.state.clone(),
            journal_mark,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub aggregate: String,
    pub stream: StreamId,
    pub sequence: u64,
    pub state: Value,
    pub journal_mark: usize,
}

impl Snapshot {
    /// Whether any of `later` (journal records after the mark) rewrote the
    /// range this snapshot covers.
    pub fn voided_by<'a>(&self, later: impl IntoIterator<Item = &'a MutationRecord>) -> bool {
        later.into_iter().any(|r| {
            r.kind.rewrites_history() && r.stream == self.stream.as_str() && r.position <= self.sequence
        })
    }
}

/// Resumes an aggregate from a snapshot and folds the remaining entries.
pub fn load_from_snapshot(
    def: &AggregateDefinition,
    snapshot: &Snapshot,
    suffix: &[SequencedEvent],
) -> AggregateInstance {
    let mut inst = AggregateInstance {
        aggregate: def.name.clone(),
        stream: snapshot.stream.clone(),
        state: snapshot.state.clone(),
        sequence: snapshot.sequence,
    };
    inst.fold(def, suffix);
    inst
}
