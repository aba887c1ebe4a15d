//! The append-only event store.
//!
//! A store is a set of disjoint named streams. Each stream holds events
//! numbered consecutively from 1. The only way to add events is
//! [`EventStore::append`], which takes the sequence number the caller expects
//! the first new event to receive; a mismatch means another writer got there
//! first and is reported as [`StoreError::ConcurrencyConflict`].
//!
//! Depending on the [`ImmutabilityPolicy`] a store may also allow positional
//! mutation (insert, update, delete). Every mutation is recorded in an
//! append-only journal, and under the `cut_off` degree only after a backup
//! of the stream has been taken.
//!
//! Locking: the stream table is behind one `RwLock`, each stream behind its
//! own. Readers of different streams never contend; appends to one stream are
//! serialized by that stream's write lock, which is also where the
//! expected-sequence check happens.

mod policy;
pub mod storage;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockWriteGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::StoreError;
use crate::event::{Event, EventType, SequencedEvent, StreamId};
use crate::format::{self, Manifest, StreamMeta};
use crate::schema::{doc as schema_doc, StoreSchema};

pub use policy::{Degree, ImmutabilityPolicy};
pub use storage::{MemoryStorage, Storage};

pub(crate) const SCHEMA_FILE: &str = "schema.def";

/// Content hash identifying a whole-stream backup.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BackupId(pub String);

impl BackupId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for BackupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    Insert,
    Update,
    Delete,
    Archive,
}

impl MutationKind {
    /// Insert, update and delete rewrite history; archiving only relocates it.
    pub fn rewrites_history(self) -> bool {
        !matches!(self, MutationKind::Archive)
    }
}

/// A positional edit for [`EventStore::apply_edits`].
#[derive(Debug, Clone, PartialEq)]
pub enum Edit {
    Insert(u64, Event),
    Update(u64, Event),
    Delete(u64),
}

impl Edit {
    pub fn position(&self) -> u64 {
        match self {
            Edit::Insert(p, _) | Edit::Update(p, _) | Edit::Delete(p) => *p,
        }
    }

    pub fn kind(&self) -> MutationKind {
        match self {
            Edit::Insert(..) => MutationKind::Insert,
            Edit::Update(..) => MutationKind::Update,
            Edit::Delete(_) => MutationKind::Delete,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Edit::Insert(..) => "insert",
            Edit::Update(..) => "update",
            Edit::Delete(_) => "delete",
        }
    }
}

/// One entry of the mutation journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutationRecord {
    pub stream: String,
    pub kind: MutationKind,
    /// Sequence position affected; for archives, the first sequence kept live.
    pub position: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup: Option<BackupId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<String>,
}

/// An immutable copy of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub stream_id: StreamId,
    pub stream_type: Option<String>,
    /// Leading events moved to cold storage; live entries start at
    /// `archived + 1`.
    pub archived: u64,
    pub entries: Vec<SequencedEvent>,
}

impl EventStream {
    pub fn new(stream_id: StreamId) -> Self {
        Self {
            stream_id,
            stream_type: None,
            archived: 0,
            entries: Vec::new(),
        }
    }

    pub fn with_type(mut self, stream_type: impl Into<String>) -> Self {
        self.stream_type = Some(stream_type.into());
        self
    }

    /// Builds a stream numbering `events` 1..n.
    pub fn from_events(stream_id: StreamId, events: impl IntoIterator<Item = Event>) -> Self {
        let entries = events
            .into_iter()
            .enumerate()
            .map(|(i, e)| SequencedEvent::new(i as u64 + 1, e))
            .collect();
        Self {
            stream_id,
            stream_type: None,
            archived: 0,
            entries,
        }
    }

    /// Number of events ever appended, archived ones included.
    pub fn len(&self) -> u64 {
        self.archived + self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_sequence(&self) -> u64 {
        self.len() + 1
    }

    /// Checks that live sequences run `archived+1, archived+2, ...` with no
    /// gap or duplicate.
    pub fn check_sequence(&self) -> Result<(), String> {
        check_sequence(self.archived, &self.entries)
    }
}

pub(crate) fn check_sequence(archived: u64, entries: &[SequencedEvent]) -> Result<(), String> {
    let mut expected = archived + 1;
    for entry in entries {
        if entry.sequence < expected {
            return Err(format!("duplicate sequence {}", entry.sequence));
        }
        if entry.sequence > expected {
            return Err(format!("gap at {expected}"));
        }
        expected += 1;
    }
    Ok(())
}

/// Size figures for a store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub streams: u64,
    /// Live events.
    pub events: u64,
    pub archived_events: u64,
    pub per_type: BTreeMap<String, u64>,
    pub bytes: u64,
}

#[derive(Debug, Default)]
struct StreamState {
    archived: u64,
    entries: Vec<SequencedEvent>,
}

impl StreamState {
    fn len(&self) -> u64 {
        self.archived + self.entries.len() as u64
    }
}

type StreamCell = Arc<RwLock<StreamState>>;

/// Guard returned by [`EventStore::pause_appends`].
pub struct AppendPause<'a> {
    _guard: RwLockWriteGuard<'a, ()>,
}

#[derive(Debug)]
pub struct EventStore {
    store_id: String,
    policy: ImmutabilityPolicy,
    streams: RwLock<BTreeMap<StreamId, StreamCell>>,
    manifest: Mutex<Manifest>,
    journal: Mutex<Vec<MutationRecord>>,
    bound_schema: RwLock<Option<StoreSchema>>,
    append_gate: RwLock<()>,
    storage: Box<dyn Storage>,
}

/// Everything needed to reassemble a store from a backend.
pub(crate) struct LoadedStore {
    pub manifest: Manifest,
    pub streams: Vec<(StreamId, u64, Vec<SequencedEvent>)>,
    pub journal: Vec<MutationRecord>,
    pub schema: Option<StoreSchema>,
}

impl EventStore {
    /// An empty store that lives only in memory.
    pub fn in_memory(store_id: impl Into<String>, policy: ImmutabilityPolicy) -> Self {
        let manifest = Manifest::new(store_id, policy);
        Self::assemble(
            LoadedStore {
                manifest,
                streams: Vec::new(),
                journal: Vec::new(),
                schema: None,
            },
            Box::<MemoryStorage>::default(),
        )
    }

    /// Creates a new store in an empty (or missing) directory.
    pub fn create(
        root: impl AsRef<Path>,
        store_id: impl Into<String>,
        policy: ImmutabilityPolicy,
    ) -> Result<Self, StoreError> {
        format::disk::create_store(root.as_ref(), store_id.into(), policy, format::OpenOptions::default())
    }

    /// Opens an existing store, verifying every stream log.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        format::disk::open_store(root.as_ref(), format::OpenOptions::default())
    }

    pub fn open_with(root: impl AsRef<Path>, options: format::OpenOptions) -> Result<Self, StoreError> {
        format::disk::open_store(root.as_ref(), options)
    }

    pub(crate) fn assemble(loaded: LoadedStore, storage: Box<dyn Storage>) -> Self {
        let streams = loaded
            .streams
            .into_iter()
            .map(|(id, archived, entries)| (id, Arc::new(RwLock::new(StreamState { archived, entries }))))
            .collect();
        Self {
            store_id: loaded.manifest.store_id.clone(),
            policy: loaded.manifest.policy,
            streams: RwLock::new(streams),
            manifest: Mutex::new(loaded.manifest),
            journal: Mutex::new(loaded.journal),
            bound_schema: RwLock::new(loaded.schema),
            append_gate: RwLock::new(()),
            storage,
        }
    }

    pub fn store_id(&self) -> &str {
        &self.store_id
    }

    pub fn policy(&self) -> ImmutabilityPolicy {
        self.policy
    }

    /// Store root directory for disk-backed stores.
    pub fn root(&self) -> Option<PathBuf> {
        self.storage.root().map(Path::to_path_buf)
    }

    fn cell(&self, stream: &StreamId) -> Result<StreamCell, StoreError> {
        self.streams
            .read()
            .unwrap()
            .get(stream)
            .cloned()
            .ok_or_else(|| StoreError::UnknownStream(stream.to_string()))
    }

    pub fn create_stream(&self, stream: &StreamId) -> Result<EventStream, StoreError> {
        self.create_stream_typed(stream, None)
    }

    /// Registers an empty stream, optionally tagged with a stream type.
    pub fn create_stream_typed(
        &self,
        stream: &StreamId,
        stream_type: Option<&str>,
    ) -> Result<EventStream, StoreError> {
        let mut streams = self.streams.write().unwrap();
        if streams.contains_key(stream) {
            return Err(StoreError::DuplicateStream(stream.to_string()));
        }
        self.storage.create_stream(stream)?;
        if let Some(t) = stream_type {
            validate_type_tag(t)?;
            self.update_meta(stream, |m| m.stream_type = Some(t.to_string()))?;
        }
        streams.insert(stream.clone(), Arc::default());
        Ok(EventStream {
            stream_id: stream.clone(),
            stream_type: stream_type.map(str::to_string),
            archived: 0,
            entries: Vec::new(),
        })
    }

    /// Creates the stream unless it already exists.
    pub fn ensure_stream(&self, stream: &StreamId, stream_type: Option<&str>) -> Result<(), StoreError> {
        match self.create_stream_typed(stream, stream_type) {
            Ok(_) | Err(StoreError::DuplicateStream(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn set_stream_type(&self, stream: &StreamId, stream_type: &str) -> Result<(), StoreError> {
        self.cell(stream)?;
        validate_type_tag(stream_type)?;
        self.update_meta(stream, |m| m.stream_type = Some(stream_type.to_string()))
    }

    pub fn stream_type(&self, stream: &StreamId) -> Option<String> {
        self.manifest
            .lock()
            .unwrap()
            .streams
            .get(stream.as_str())
            .and_then(|m| m.stream_type.clone())
    }

    fn update_meta(&self, stream: &StreamId, f: impl FnOnce(&mut StreamMeta)) -> Result<(), StoreError> {
        let mut manifest = self.manifest.lock().unwrap();
        let mut next = manifest.clone();
        f(next.streams.entry(stream.to_string()).or_default());
        self.storage.save_manifest(&next)?;
        *manifest = next;
        Ok(())
    }

    pub fn stream_ids(&self) -> Vec<StreamId> {
        self.streams.read().unwrap().keys().cloned().collect()
    }

    pub fn contains_stream(&self, stream: &StreamId) -> bool {
        self.streams.read().unwrap().contains_key(stream)
    }

    /// Number of events ever appended to the stream (archived included).
    pub fn stream_len(&self, stream: &StreamId) -> Result<u64, StoreError> {
        Ok(self.cell(stream)?.read().unwrap().len())
    }

    /// Appends `events` atomically. `expected_sequence` must equal the
    /// stream length plus one; the events receive consecutive sequence
    /// numbers starting there.
    pub fn append(
        &self,
        stream: &StreamId,
        expected_sequence: u64,
        events: Vec<Event>,
    ) -> Result<Vec<SequencedEvent>, StoreError> {
        self.append_with(stream, expected_sequence, events, |_| ())
            .map(|(appended, ())| appended)
    }

    /// Like [`append`](Self::append), but runs `on_commit` with the new
    /// entries while the stream is still locked, so that whatever it updates
    /// becomes visible together with the events.
    pub fn append_with<R>(
        &self,
        stream: &StreamId,
        expected_sequence: u64,
        events: Vec<Event>,
        on_commit: impl FnOnce(&[SequencedEvent]) -> R,
    ) -> Result<(Vec<SequencedEvent>, R), StoreError> {
        if events.is_empty() {
            return Err(StoreError::EmptyAppend);
        }
        for e in &events {
            e.validate()?;
        }
        let _gate = self.append_gate.read().unwrap();
        let cell = self.cell(stream)?;
        let mut state = cell.write().unwrap();
        let next = state.len() + 1;
        if expected_sequence != next {
            return Err(StoreError::ConcurrencyConflict {
                stream: stream.to_string(),
                expected: next,
                supplied: expected_sequence,
            });
        }
        let appended: Vec<SequencedEvent> = events
            .into_iter()
            .zip(next..)
            .map(|(event, sequence)| SequencedEvent { sequence, event })
            .collect();
        let bytes = format::encode_records(&appended);
        self.storage.append(stream, &bytes)?;
        state.entries.extend(appended.iter().cloned());
        let r = on_commit(&appended);
        Ok((appended, r))
    }

    /// Live entries with `sequence >= from_sequence`, in order.
    pub fn read(&self, stream: &StreamId, from_sequence: u64) -> Result<Vec<SequencedEvent>, StoreError> {
        let cell = self.cell(stream)?;
        let state = cell.read().unwrap();
        Ok(suffix(&state, from_sequence).to_vec())
    }

    /// Runs `f` over the live entries from `from_sequence` without copying.
    pub fn with_entries<R>(
        &self,
        stream: &StreamId,
        from_sequence: u64,
        f: impl FnOnce(&[SequencedEvent]) -> R,
    ) -> Result<R, StoreError> {
        let cell = self.cell(stream)?;
        let state = cell.read().unwrap();
        Ok(f(suffix(&state, from_sequence)))
    }

    /// Runs `f` over the live entries of several streams at once, holding
    /// their read locks together so the view is consistent. The slice is
    /// ordered by stream id; unknown ids are skipped.
    pub fn with_streams<R>(
        &self,
        ids: &[StreamId],
        f: impl FnOnce(&[(&StreamId, &[SequencedEvent])]) -> R,
    ) -> R {
        let mut cells: Vec<(StreamId, StreamCell)> = {
            let table = self.streams.read().unwrap();
            ids.iter()
                .filter_map(|id| table.get(id).map(|c| (id.clone(), c.clone())))
                .collect()
        };
        cells.sort_by(|a, b| a.0.cmp(&b.0));
        cells.dedup_by(|a, b| a.0 == b.0);
        let guards: Vec<_> = cells.iter().map(|(_, c)| c.read().unwrap()).collect();
        let views: Vec<(&StreamId, &[SequencedEvent])> = cells
            .iter()
            .zip(&guards)
            .map(|((id, _), g)| (id, g.entries.as_slice()))
            .collect();
        f(&views)
    }

    /// Snapshot of a whole stream (live part).
    pub fn stream(&self, stream: &StreamId) -> Result<EventStream, StoreError> {
        let cell = self.cell(stream)?;
        let state = cell.read().unwrap();
        Ok(EventStream {
            stream_id: stream.clone(),
            stream_type: self.stream_type(stream),
            archived: state.archived,
            entries: state.entries.clone(),
        })
    }

    /// Snapshots of every stream, ordered by id.
    pub fn streams(&self) -> Vec<EventStream> {
        self.stream_ids()
            .iter()
            .filter_map(|id| self.stream(id).ok())
            .collect()
    }

    /// Full history of a stream: archived events followed by live ones.
    pub fn read_stitched(&self, stream: &StreamId) -> Result<Vec<SequencedEvent>, StoreError> {
        let cell = self.cell(stream)?;
        let state = cell.read().unwrap();
        let archives = self
            .manifest
            .lock()
            .unwrap()
            .streams
            .get(stream.as_str())
            .map(|m| m.archives.clone())
            .unwrap_or_default();
        let mut out = Vec::with_capacity(state.len() as usize);
        for name in &archives {
            let bytes = self.storage.get_archive(name)?;
            let scan = format::scan_log(&bytes);
            if let Some(err) = scan.error {
                return Err(StoreError::StoreCorrupt(format!("archive {name}: {err}")));
            }
            out.extend(scan.records);
        }
        out.extend(state.entries.iter().cloned());
        check_sequence(0, &out).map_err(|e| StoreError::StoreCorrupt(format!("stream {stream}: {e}")))?;
        Ok(out)
    }

    /// Canonical bytes of the live stream log.
    pub fn stream_bytes(&self, stream: &StreamId) -> Result<Vec<u8>, StoreError> {
        let cell = self.cell(stream)?;
        let state = cell.read().unwrap();
        Ok(format::encode_records(&state.entries))
    }

    /// SHA-256 over every stream id and its canonical log bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for id in self.stream_ids() {
            hasher.update(id.as_str().as_bytes());
            hasher.update(b"\n");
            if let Ok(bytes) = self.stream_bytes(&id) {
                hasher.update(&bytes);
            }
            hasher.update(b"\0");
        }
        hex::encode(hasher.finalize())
    }

    // -- mutation --------------------------------------------------------

    fn check_mutation(&self, operation: &str, stream: &StreamId, backup: Option<&BackupId>) -> Result<(), StoreError> {
        if !self.policy.permits_mutation() {
            return Err(StoreError::ImmutabilityViolation {
                degree: self.policy.degree(),
                operation: operation.to_string(),
                reason: None,
            });
        }
        if self.policy.backup_required() {
            let Some(id) = backup else {
                return Err(StoreError::ImmutabilityViolation {
                    degree: self.policy.degree(),
                    operation: operation.to_string(),
                    reason: Some("a backup of the stream must be recorded first".into()),
                });
            };
            match self.storage.get_backup(id.as_str())? {
                None => return Err(StoreError::UnknownBackup(id.to_string())),
                Some((owner, _)) if &owner != stream => {
                    return Err(StoreError::BackupMismatch {
                        backup: id.to_string(),
                        stream: stream.to_string(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Applies a batch of positional edits to one stream atomically: all of
    /// them or none reach the log. Positions refer to the stream as left by
    /// the preceding edits. With `expected_len` set, the batch fails with a
    /// conflict if the stream length differs. Each edit is journaled.
    pub fn apply_edits(
        &self,
        stream: &StreamId,
        expected_len: Option<u64>,
        backup: Option<&BackupId>,
        edits: Vec<Edit>,
    ) -> Result<EventStream, StoreError> {
        let op = match edits.first() {
            Some(e) => e.kind_name(),
            None => "mutation",
        };
        self.check_mutation(op, stream, backup)?;
        for e in &edits {
            if let Edit::Insert(_, ev) | Edit::Update(_, ev) = e {
                ev.validate()?;
            }
        }
        let _gate = self.append_gate.read().unwrap();
        let cell = self.cell(stream)?;
        let mut state = cell.write().unwrap();
        if let Some(expected) = expected_len {
            if state.len() != expected {
                return Err(StoreError::ConcurrencyConflict {
                    stream: stream.to_string(),
                    expected: state.len() + 1,
                    supplied: expected + 1,
                });
            }
        }
        let first = state.archived + 1;
        let mut entries = state.entries.clone();
        let mut records = Vec::with_capacity(edits.len());
        for edit in edits {
            let position = edit.position();
            let len = state.archived + entries.len() as u64;
            let last = if matches!(edit, Edit::Insert(..)) { len + 1 } else { len };
            if position < first || position > last {
                return Err(StoreError::PositionOutOfRange {
                    stream: stream.to_string(),
                    position,
                    valid: if first > last {
                        "none".into()
                    } else {
                        format!("{first}..={last}")
                    },
                });
            }
            let idx = (position - first) as usize;
            let kind = edit.kind();
            match edit {
                Edit::Insert(_, ev) => entries.insert(idx, SequencedEvent::new(0, ev)),
                Edit::Update(_, ev) => entries[idx].event = ev,
                Edit::Delete(_) => {
                    entries.remove(idx);
                }
            }
            records.push(MutationRecord {
                stream: stream.to_string(),
                kind,
                position,
                backup: backup.cloned(),
                archive: None,
            });
        }
        for (i, e) in entries.iter_mut().enumerate() {
            e.sequence = first + i as u64;
        }
        if !records.is_empty() {
            self.storage.rewrite(stream, &format::encode_records(&entries))?;
            for record in records {
                self.record_mutation(record)?;
            }
            state.entries = entries;
        }
        Ok(EventStream {
            stream_id: stream.clone(),
            stream_type: self.stream_type(stream),
            archived: state.archived,
            entries: state.entries.clone(),
        })
    }

    fn record_mutation(&self, record: MutationRecord) -> Result<(), StoreError> {
        let mut journal = self.journal.lock().unwrap();
        self.storage.append_journal(&record)?;
        journal.push(record);
        Ok(())
    }

    /// Inserts `event` at `position`, shifting later events up by one.
    pub fn insert_at(
        &self,
        stream: &StreamId,
        position: u64,
        event: Event,
        backup: Option<&BackupId>,
    ) -> Result<EventStream, StoreError> {
        self.apply_edits(stream, None, backup, vec![Edit::Insert(position, event)])
    }

    /// Replaces the event at `position`.
    pub fn update_at(
        &self,
        stream: &StreamId,
        position: u64,
        event: Event,
        backup: Option<&BackupId>,
    ) -> Result<EventStream, StoreError> {
        self.apply_edits(stream, None, backup, vec![Edit::Update(position, event)])
    }

    /// Removes the event at `position`, shifting later events down by one.
    pub fn delete_at(
        &self,
        stream: &StreamId,
        position: u64,
        backup: Option<&BackupId>,
    ) -> Result<EventStream, StoreError> {
        self.apply_edits(stream, None, backup, vec![Edit::Delete(position)])
    }

    /// Records a whole-stream backup of the live log. Backups are addressed
    /// by the hash of the stream id and content and are never removed.
    pub fn backup_stream(&self, stream: &StreamId) -> Result<BackupId, StoreError> {
        let cell = self.cell(stream)?;
        let state = cell.read().unwrap();
        let bytes = format::encode_records(&state.entries);
        let mut hasher = Sha256::new();
        hasher.update(stream.as_str().as_bytes());
        hasher.update(b"\n");
        hasher.update(&bytes);
        let id = BackupId(hex::encode(hasher.finalize()));
        self.storage.put_backup(id.as_str(), stream, &bytes)?;
        Ok(id)
    }

    /// The exact log bytes captured by a backup.
    pub fn backup_bytes(&self, id: &BackupId) -> Result<Vec<u8>, StoreError> {
        self.storage
            .get_backup(id.as_str())?
            .map(|(_, bytes)| bytes)
            .ok_or_else(|| StoreError::UnknownBackup(id.to_string()))
    }

    /// Stream id and events captured by a backup.
    pub fn restore_backup(&self, id: &BackupId) -> Result<(StreamId, Vec<SequencedEvent>), StoreError> {
        let (stream, bytes) = self
            .storage
            .get_backup(id.as_str())?
            .ok_or_else(|| StoreError::UnknownBackup(id.to_string()))?;
        let scan = format::scan_log(&bytes);
        if let Some(err) = scan.error {
            return Err(StoreError::StoreCorrupt(format!("backup {id}: {err}")));
        }
        Ok((stream, scan.records))
    }

    /// Moves events with `sequence < before_sequence` to an archive file.
    /// The live stream keeps its numbering, so stitched reads see the full
    /// history and appends continue where they were.
    pub fn archive_cold(&self, stream: &StreamId, before_sequence: u64) -> Result<String, StoreError> {
        if !self.policy.permits_archive() {
            return Err(StoreError::ImmutabilityViolation {
                degree: self.policy.degree(),
                operation: "archiving".into(),
                reason: Some("no archival exemption configured".into()),
            });
        }
        let _gate = self.append_gate.read().unwrap();
        let cell = self.cell(stream)?;
        let mut state = cell.write().unwrap();
        let first = state.archived + 1;
        let last = state.len() + 1;
        if before_sequence <= first || before_sequence > last {
            return Err(StoreError::PositionOutOfRange {
                stream: stream.to_string(),
                position: before_sequence,
                valid: if first + 1 > last {
                    "none".into()
                } else {
                    format!("{}..={last}", first + 1)
                },
            });
        }
        let split = (before_sequence - first) as usize;
        let name = format!("archive/{}.{}-{}.log", stream, first, before_sequence - 1);
        self.storage
            .put_archive(&name, &format::encode_records(&state.entries[..split]))?;
        let rest = state.entries[split..].to_vec();
        self.storage.rewrite(stream, &format::encode_records(&rest))?;
        let archived = before_sequence - 1;
        self.update_meta(stream, |m| {
            m.archived = archived;
            m.archives.push(name.clone());
        })?;
        self.record_mutation(MutationRecord {
            stream: stream.to_string(),
            kind: MutationKind::Archive,
            position: before_sequence,
            backup: None,
            archive: Some(name.clone()),
        })?;
        state.archived = archived;
        state.entries = rest;
        Ok(name)
    }

    pub fn journal(&self) -> Vec<MutationRecord> {
        self.journal.lock().unwrap().clone()
    }

    pub fn journal_len(&self) -> usize {
        self.journal.lock().unwrap().len()
    }

    /// Journal entries from index `from` on.
    pub fn journal_since(&self, from: usize) -> Vec<MutationRecord> {
        let journal = self.journal.lock().unwrap();
        journal.get(from..).map(<[_]>::to_vec).unwrap_or_default()
    }

    /// Blocks appends and mutations until the guard is dropped. Reads
    /// continue.
    pub fn pause_appends(&self) -> AppendPause<'_> {
        AppendPause {
            _guard: self.append_gate.write().unwrap(),
        }
    }

    // -- schema binding ----------------------------------------------------

    pub fn bind_schema(&self, schema: StoreSchema) -> Result<(), StoreError> {
        let doc = schema_doc::encode(&schema);
        let path = self.storage.put_schema(&doc)?;
        {
            let mut manifest = self.manifest.lock().unwrap();
            let mut next = manifest.clone();
            next.schema = Some(path);
            self.storage.save_manifest(&next)?;
            *manifest = next;
        }
        *self.bound_schema.write().unwrap() = Some(schema);
        Ok(())
    }

    pub fn bound_schema(&self) -> Option<StoreSchema> {
        self.bound_schema.read().unwrap().clone()
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().unwrap().clone()
    }

    pub fn stats(&self) -> StoreStats {
        let mut stats = StoreStats {
            streams: 0,
            events: 0,
            archived_events: 0,
            per_type: BTreeMap::new(),
            bytes: 0,
        };
        let mut encoded = 0u64;
        for id in self.stream_ids() {
            let Ok(cell) = self.cell(&id) else { continue };
            let state = cell.read().unwrap();
            stats.streams += 1;
            stats.events += state.entries.len() as u64;
            stats.archived_events += state.archived;
            for e in &state.entries {
                *stats.per_type.entry(e.event.event_type.to_string()).or_default() += 1;
                let mut buf = Vec::new();
                format::encode_record_into(e, &mut buf);
                encoded += buf.len() as u64;
            }
        }
        stats.bytes = self.storage.size_on_disk().unwrap_or(encoded);
        stats
    }
}

fn suffix(state: &StreamState, from_sequence: u64) -> &[SequencedEvent] {
    let skip = from_sequence.saturating_sub(state.archived + 1) as usize;
    state.entries.get(skip..).unwrap_or(&[])
}

fn validate_type_tag(tag: &str) -> Result<(), StoreError> {
    if crate::event::is_type_name(tag) {
        Ok(())
    } else {
        Err(StoreError::InvalidName {
            what: "stream type",
            name: tag.to_string(),
        })
    }
}

/// Per-type event counts over a slice of entries.
pub fn count_types(entries: &[SequencedEvent]) -> BTreeMap<EventType, u64> {
    let mut out = BTreeMap::new();
    for e in entries {
        *out.entry(e.event.event_type.clone()).or_default() += 1;
    }
    out
}
