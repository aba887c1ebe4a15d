//! Backends that persist what an [`EventStore`](super::EventStore) holds in
//! memory. The store owns all invariants; a backend only moves bytes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use crate::error::StoreError;
use crate::event::StreamId;
use crate::format::Manifest;

use super::MutationRecord;

pub trait Storage: Send + Sync + fmt::Debug {
    fn create_stream(&self, stream: &StreamId) -> Result<(), StoreError>;

    /// Appends encoded record lines to the stream log. On error nothing of
    /// `bytes` may remain in the log.
    fn append(&self, stream: &StreamId, bytes: &[u8]) -> Result<(), StoreError>;

    /// Atomically replaces the whole stream log.
    fn rewrite(&self, stream: &StreamId, bytes: &[u8]) -> Result<(), StoreError>;

    fn save_manifest(&self, manifest: &Manifest) -> Result<(), StoreError>;

    fn append_journal(&self, record: &MutationRecord) -> Result<(), StoreError>;

    fn put_backup(&self, id: &str, stream: &StreamId, bytes: &[u8]) -> Result<(), StoreError>;

    fn get_backup(&self, id: &str) -> Result<Option<(StreamId, Vec<u8>)>, StoreError>;

    /// Writes an archive file; `name` is a path relative to the store root.
    fn put_archive(&self, name: &str, bytes: &[u8]) -> Result<(), StoreError>;

    fn get_archive(&self, name: &str) -> Result<Vec<u8>, StoreError>;

    /// Stores a schema document and returns its path relative to the root.
    fn put_schema(&self, doc: &[u8]) -> Result<String, StoreError>;

    fn root(&self) -> Option<&Path>;

    /// Total bytes held by the store, if the backend can tell.
    fn size_on_disk(&self) -> Option<u64> {
        None
    }
}

/// Keeps backups, archives and schema documents in memory. Stream logs are
/// not duplicated: the store's entries are the only copy.
#[derive(Debug, Default)]
pub struct MemoryStorage {
    backups: Mutex<HashMap<String, (StreamId, Vec<u8>)>>,
    archives: Mutex<HashMap<String, Vec<u8>>>,
}

impl Storage for MemoryStorage {
    fn create_stream(&self, _stream: &StreamId) -> Result<(), StoreError> {
        Ok(())
    }

    fn append(&self, _stream: &StreamId, _bytes: &[u8]) -> Result<(), StoreError> {
        Ok(())
    }

    fn rewrite(&self, _stream: &StreamId, _bytes: &[u8]) -> Result<(), StoreError> {
        Ok(())
    }

    fn save_manifest(&self, _manifest: &Manifest) -> Result<(), StoreError> {
        Ok(())
    }

    fn append_journal(&self, _record: &MutationRecord) -> Result<(), StoreError> {
        Ok(())
    }

    fn put_backup(&self, id: &str, stream: &StreamId, bytes: &[u8]) -> Result<(), StoreError> {
        self.backups
            .lock()
            .unwrap()
            .entry(id.to_string())
            .or_insert_with(|| (stream.clone(), bytes.to_vec()));
        Ok(())
    }

    fn get_backup(&self, id: &str) -> Result<Option<(StreamId, Vec<u8>)>, StoreError> {
        Ok(self.backups.lock().unwrap().get(id).cloned())
    }

    fn put_archive(&self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.archives
            .lock()
            .unwrap()
            .insert(name.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get_archive(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        self.archives
            .lock()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| StoreError::StoreCorrupt(format!("missing archive {name}")))
    }

    fn put_schema(&self, _doc: &[u8]) -> Result<String, StoreError> {
        Ok(super::SCHEMA_FILE.to_string())
    }

    fn root(&self) -> Option<&Path> {
        None
    }
}
