//! An event-sourcing engine: an append-only event store with optimistic
//! concurrency and configurable immutability, declarative schemas with
//! conformance checking, a CQRS runtime with projections, and tooling for
//! evolving stored events when their schema changes.

pub mod builtin;
pub mod cli;
pub mod error;
pub mod event;
pub mod evolution;
pub mod format;
pub mod harness;
pub mod schema;
pub mod runtime;
pub mod store;

pub use error::{HarnessError, MalformedRecord, SchemaError, StoreError};
pub use event::{Event, EventType, Metadata, Payload, SequencedEvent, StreamId};
pub use store::{BackupId, Degree, EventStore, EventStream, ImmutabilityPolicy, MutationKind, MutationRecord};
