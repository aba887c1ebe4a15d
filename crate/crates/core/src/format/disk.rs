//! Directory layout of a persistent store:
//!
//! ```text
//! <root>/store.meta          manifest (format version, policy, stream metadata)
//! <root>/<stream_id>.log     one append-only log per stream
//! <root>/journal.log         mutation journal
//! <root>/backups/<id>.log    whole-stream backups, header line + records
//! <root>/archive/*.log       events moved to cold storage
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::StoreError;
use crate::event::StreamId;
use crate::schema::doc as schema_doc;
use crate::store::{EventStore, ImmutabilityPolicy, LoadedStore, MutationRecord, Storage, SCHEMA_FILE};

use super::manifest::MANIFEST_FILE;
use super::{scan_log, Manifest};

pub const JOURNAL_FILE: &str = "journal.log";
pub const LOCK_FILE: &str = "store.lock";
const BACKUP_DIR: &str = "backups";
const ARCHIVE_DIR: &str = "archive";

/// What a successful append guarantees about the written lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// Lines are handed to the operating system before `append` returns.
    Flush,
    /// Lines are also synced to stable storage.
    #[default]
    Fsync,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OpenOptions {
    pub durability: Durability,
    /// Cut an unterminated final line off a stream log instead of reporting
    /// the store as corrupt. Only a torn tail is repaired; any other bad
    /// line still fails the open.
    pub repair_torn_tail: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackupHeader {
    stream: StreamId,
    events: u64,
}

#[derive(Debug)]
pub struct DiskStorage {
    root: PathBuf,
    durability: Durability,
    handles: Mutex<HashMap<StreamId, Arc<Mutex<File>>>>,
    journal: Mutex<Option<File>>,
}

impl DiskStorage {
    fn new(root: PathBuf, durability: Durability) -> Self {
        Self {
            root,
            durability,
            handles: Mutex::new(HashMap::new()),
            journal: Mutex::new(None),
        }
    }

    fn log_path(&self, stream: &StreamId) -> PathBuf {
        self.root.join(format!("{stream}.log"))
    }

    fn handle(&self, stream: &StreamId) -> io::Result<Arc<Mutex<File>>> {
        let mut handles = self.handles.lock().unwrap();
        if let Some(h) = handles.get(stream) {
            return Ok(h.clone());
        }
        let file = fs::OpenOptions::new().append(true).open(self.log_path(stream))?;
        let h = Arc::new(Mutex::new(file));
        handles.insert(stream.clone(), h.clone());
        Ok(h)
    }

    fn sync(&self, file: &File) -> io::Result<()> {
        match self.durability {
            Durability::Fsync => file.sync_data(),
            Durability::Flush => Ok(()),
        }
    }

    fn write_atomic(&self, rel: &str, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.root.join(rel), bytes)
    }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over
/// `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(parent) = path.parent() {
        // directory sync is best effort; not every platform allows it
        if let Ok(dir) = File::open(parent) {
            let _ = dir.sync_all();
        }
    }
    Ok(())
}

impl Storage for DiskStorage {
    fn create_stream(&self, stream: &StreamId) -> Result<(), StoreError> {
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.log_path(stream))?;
        Ok(())
    }

    fn append(&self, stream: &StreamId, bytes: &[u8]) -> Result<(), StoreError> {
        let handle = self.handle(stream)?;
        let mut file = handle.lock().unwrap();
        let before = file.metadata()?.len();
        let res = file.write_all(bytes).and_then(|_| self.sync(&file));
        if let Err(e) = res {
            // leave no partial record behind
            let _ = file.set_len(before);
            return Err(e.into());
        }
        Ok(())
    }

    fn rewrite(&self, stream: &StreamId, bytes: &[u8]) -> Result<(), StoreError> {
        let mut handles = self.handles.lock().unwrap();
        // hold the old handle's lock so no append interleaves with the swap
        let old = handles.remove(stream);
        let _guard = old.as_ref().map(|h| h.lock().unwrap());
        write_atomic(&self.log_path(stream), bytes)?;
        Ok(())
    }

    fn save_manifest(&self, manifest: &Manifest) -> Result<(), StoreError> {
        self.write_atomic(MANIFEST_FILE, &manifest.encode())?;
        Ok(())
    }

    fn append_journal(&self, record: &MutationRecord) -> Result<(), StoreError> {
        let mut guard = self.journal.lock().unwrap();
        if guard.is_none() {
            *guard = Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(self.root.join(JOURNAL_FILE))?,
            );
        }
        let file = guard.as_mut().unwrap();
        let mut line = serde_json::to_vec(record).expect("journal record serializes");
        line.push(b'\n');
        file.write_all(&line)?;
        file.sync_data()?;
        Ok(())
    }

    fn put_backup(&self, id: &str, stream: &StreamId, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = self.root.join(BACKUP_DIR);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{id}.log"));
        if path.exists() {
            return Ok(());
        }
        let header = BackupHeader {
            stream: stream.clone(),
            events: bytes.iter().filter(|&&b| b == b'\n').count() as u64,
        };
        let mut out = serde_json::to_vec(&header).expect("backup header serializes");
        out.push(b'\n');
        out.extend_from_slice(bytes);
        write_atomic(&path, &out)?;
        Ok(())
    }

    fn get_backup(&self, id: &str) -> Result<Option<(StreamId, Vec<u8>)>, StoreError> {
        if !id.chars().all(|c| c.is_ascii_hexdigit()) {
            return Ok(None);
        }
        let path = self.root.join(BACKUP_DIR).join(format!("{id}.log"));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| StoreError::StoreCorrupt(format!("backup {id}: missing header")))?;
        let header: BackupHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| StoreError::StoreCorrupt(format!("backup {id}: {e}")))?;
        Ok(Some((header.stream, bytes[split + 1..].to_vec())))
    }

    fn put_archive(&self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        fs::create_dir_all(self.root.join(ARCHIVE_DIR))?;
        self.write_atomic(name, bytes)?;
        Ok(())
    }

    fn get_archive(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        fs::read(self.root.join(name)).map_err(|e| StoreError::StoreCorrupt(format!("archive {name}: {e}")))
    }

    fn put_schema(&self, doc: &[u8]) -> Result<String, StoreError> {
        self.write_atomic(SCHEMA_FILE, doc)?;
        Ok(SCHEMA_FILE.to_string())
    }

    fn root(&self) -> Option<&Path> {
        Some(&self.root)
    }

    fn size_on_disk(&self) -> Option<u64> {
        Some(dir_size(&self.root))
    }
}

fn dir_size(path: &Path) -> u64 {
    let Ok(entries) = fs::read_dir(path) else { return 0 };
    entries
        .flatten()
        .map(|entry| match entry.metadata() {
            Ok(m) if m.is_dir() => dir_size(&entry.path()),
            Ok(m) => m.len(),
            Err(_) => 0,
        })
        .sum()
}

pub(crate) fn create_store(
    root: &Path,
    store_id: String,
    policy: ImmutabilityPolicy,
    options: OpenOptions,
) -> Result<EventStore, StoreError> {
    if root.join(MANIFEST_FILE).exists() {
        return Err(StoreError::StoreExists(root.display().to_string()));
    }
    fs::create_dir_all(root)?;
    let manifest = Manifest::new(store_id, policy);
    let storage = DiskStorage::new(root.to_path_buf(), options.durability);
    storage.save_manifest(&manifest)?;
    Ok(EventStore::assemble(
        LoadedStore {
            manifest,
            streams: Vec::new(),
            journal: Vec::new(),
            schema: None,
        },
        Box::new(storage),
    ))
}

pub(crate) fn open_store(root: &Path, options: OpenOptions) -> Result<EventStore, StoreError> {
    let manifest_bytes = fs::read(root.join(MANIFEST_FILE)).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            StoreError::StoreCorrupt(format!("no {MANIFEST_FILE} in {}", root.display()))
        } else {
            e.into()
        }
    })?;
    let manifest = Manifest::decode(&manifest_bytes)?;

    let mut names = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == JOURNAL_FILE {
            continue;
        }
        if let Some(stem) = name.strip_suffix(".log") {
            names.push(stem.to_string());
        }
    }
    names.sort();

    let mut streams = Vec::with_capacity(names.len());
    for stem in &names {
        let id = StreamId::new(stem.as_str())
            .map_err(|_| StoreError::StoreCorrupt(format!("unexpected log file {stem}.log")))?;
        let path = root.join(format!("{stem}.log"));
        let bytes = fs::read(&path)?;
        let mut scan = scan_log(&bytes);
        if let Some(err) = scan.error.take() {
            if scan.torn_tail && options.repair_torn_tail {
                let f = fs::OpenOptions::new().write(true).open(&path)?;
                f.set_len(scan.valid_len as u64)?;
                f.sync_all()?;
            } else {
                return Err(StoreError::StoreCorrupt(format!("stream {id}: {err}")));
            }
        }
        let archived = manifest.streams.get(stem).map(|m| m.archived).unwrap_or(0);
        crate::store::check_sequence(archived, &scan.records)
            .map_err(|e| StoreError::StoreCorrupt(format!("stream {id}: {e}")))?;
        streams.push((id, archived, scan.records));
    }
    for (name, meta) in &manifest.streams {
        if !names.iter().any(|n| n == name) {
            return Err(StoreError::StoreCorrupt(format!(
                "stream {name} is listed in {MANIFEST_FILE} but has no log"
            )));
        }
        if meta.archived > 0 && meta.archives.is_empty() {
            return Err(StoreError::StoreCorrupt(format!("stream {name}: archived events without archive files")));
        }
    }

    let journal = read_journal(&root.join(JOURNAL_FILE))?;

    let schema = match &manifest.schema {
        Some(rel) => {
            let text = fs::read_to_string(root.join(rel))
                .map_err(|e| StoreError::StoreCorrupt(format!("schema {rel}: {e}")))?;
            Some(
                schema_doc::parse(&text)
                    .map_err(|e| StoreError::StoreCorrupt(format!("schema {rel}: {e}")))?,
            )
        }
        None => None,
    };

    let storage = DiskStorage::new(root.to_path_buf(), options.durability);
    Ok(EventStore::assemble(
        LoadedStore {
            manifest,
            streams,
            journal,
            schema,
        },
        Box::new(storage),
    ))
}

fn read_journal(path: &Path) -> Result<Vec<MutationRecord>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        let Some(body) = line.strip_suffix(b"\n") else {
            return Err(StoreError::StoreCorrupt(format!(
                "{JOURNAL_FILE}: torn write at line {} (byte offset {offset})",
                i + 1
            )));
        };
        let record: MutationRecord = serde_json::from_slice(body).map_err(|e| {
            StoreError::StoreCorrupt(format!("{JOURNAL_FILE}: line {} (byte offset {offset}): {e}", i + 1))
        })?;
        out.push(record);
        offset += line.len();
    }
    Ok(out)
}

/// Exclusive advisory lock on a store directory, held for the lifetime of
/// the value. The lock file is created with `create_new`, so a second holder
/// fails instead of waiting.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Locked(path.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
