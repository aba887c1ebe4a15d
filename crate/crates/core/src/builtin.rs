//! A small licensing domain used by the CLI and the simulation harness.
//!
//! Streams of type `license` hold `LicenseCreated` followed by at most one
//! `LicenseRevoked`. Commands `CreateLicense` and `RevokeLicense` are
//! handled by the `license` aggregate.

use std::sync::Arc;

use serde_json::{json, Value};

use crate::event::{Event, Payload, SequencedEvent, StreamId};
use crate::runtime::{
    AggregateDefinition, Command, ProjectionMode, ProjectorDefinition, Rejection, StreamSelector, System,
};
use crate::error::RuntimeError;
use crate::schema::{EventSchema, FieldKind, FieldSpec, OrderingRule, StoreSchema, StreamSchema};
use crate::store::EventStore;

pub const LICENSE_STREAM_TYPE: &str = "license";

/// Projector names registered by [`system`].
pub const LICENSES_PRE_BUILT: &str = "licenses";
pub const LICENSES_SYNCHRONOUS: &str = "licenses_sync";
pub const LICENSES_ON_DEMAND: &str = "licenses_on_demand";
pub const EVENT_COUNT: &str = "event_count";
pub const EVENTS_BY_TYPE: &str = "events_by_type";

pub fn license_schema() -> StoreSchema {
    StoreSchema::new("licensing", 1).stream(
        StreamSchema::new(LICENSE_STREAM_TYPE)
            .event(
                EventSchema::new("LicenseCreated", 1)
                    .field(FieldSpec::required("customerId", FieldKind::String))
                    .field(FieldSpec::required("titleId", FieldKind::String))
                    .field(FieldSpec::required("date", FieldKind::Timestamp)),
            )
            .event(EventSchema::new("LicenseRevoked", 1).field(FieldSpec::optional("reason", FieldKind::String)))
            .rule(OrderingRule::initial("LicenseCreated"))
            .rule(OrderingRule::at_most_once("LicenseCreated"))
            .rule(OrderingRule::precedes("LicenseCreated", "LicenseRevoked"))
            .rule(OrderingRule::terminal("LicenseRevoked")),
    )
}

fn license_fold(state: &mut Value, _: &StreamId, entry: &SequencedEvent) {
    match entry.event.event_type.as_str() {
        "LicenseCreated" => {
            state["exists"] = json!(true);
            state["customerId"] = entry.event.payload.get("customerId").cloned().unwrap_or(Value::Null);
        }
        "LicenseRevoked" => state["revoked"] = json!(true),
        _ => {}
    }
}

fn string_field<'a>(payload: &'a Payload, name: &str) -> Result<&'a str, Rejection> {
    payload
        .get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| Rejection::new("invalid", format!("{name} must be a string")))
}

fn license_accept(state: &Value, cmd: &Command) -> Result<Vec<Event>, Rejection> {
    let exists = state["exists"].as_bool().unwrap_or(false);
    let revoked = state["revoked"].as_bool().unwrap_or(false);
    match cmd.command_type.as_str() {
        "CreateLicense" => {
            if exists {
                return Err(Rejection::new(
                    "duplicate",
                    format!("license {} already exists", cmd.target_stream),
                ));
            }
            let mut payload = Payload::new();
            for field in ["customerId", "titleId", "date"] {
                payload.insert(field, string_field(&cmd.payload, field)?);
            }
            Ok(vec![event("LicenseCreated", payload)])
        }
        "RevokeLicense" => {
            if !exists {
                return Err(Rejection::new("not_found", format!("no license {}", cmd.target_stream)));
            }
            if revoked {
                return Err(Rejection::new(
                    "already_revoked",
                    format!("license {} is already revoked", cmd.target_stream),
                ));
            }
            let mut payload = Payload::new();
            if let Some(reason) = cmd.payload.get("reason") {
                payload.insert("reason", reason.clone());
            }
            Ok(vec![event("LicenseRevoked", payload)])
        }
        other => Err(Rejection::new("unsupported", format!("license cannot handle {other}"))),
    }
}

fn event(event_type: &str, payload: Payload) -> Event {
    Event::new(event_type, 1, payload).expect("builtin event types are valid")
}

pub fn license_aggregate() -> AggregateDefinition {
    AggregateDefinition::new("license", json!({}), license_fold, license_accept)
        .handles("CreateLicense")
        .handles("RevokeLicense")
        .stream_type(LICENSE_STREAM_TYPE)
        .snapshot_every(50)
}

/// Counts active and revoked licenses.
pub fn license_counts(name: &str, mode: ProjectionMode) -> ProjectorDefinition {
    ProjectorDefinition::new(name, json!({"active": 0, "revoked": 0}), |state, _, entry| {
        let bump = |state: &mut Value, key: &str, by: i64| {
            state[key] = json!(state[key].as_i64().unwrap_or(0) + by);
        };
        match entry.event.event_type.as_str() {
            "LicenseCreated" => bump(state, "active", 1),
            "LicenseRevoked" => {
                bump(state, "active", -1);
                bump(state, "revoked", 1);
            }
            _ => {}
        }
    })
    .selector(StreamSelector::StreamType(LICENSE_STREAM_TYPE.into()))
    .mode(mode)
}

/// Events per stream; answers with the total unless asked for one stream
/// with `{"stream": id}`.
pub fn event_count() -> ProjectorDefinition {
    ProjectorDefinition::new(EVENT_COUNT, json!(0), |state, _, _| {
        *state = json!(state.as_u64().unwrap_or(0) + 1);
    })
    .per_stream()
    .mode(ProjectionMode::PreBuilt)
    .answer(|state, params| match params.get("stream").and_then(Value::as_str) {
        Some(id) => state.get(id).cloned().unwrap_or(json!(0)),
        None => json!(state
            .as_object()
            .map(|m| m.values().filter_map(Value::as_u64).sum::<u64>())
            .unwrap_or(0)),
    })
}

/// Events per event type over the whole store.
pub fn events_by_type() -> ProjectorDefinition {
    ProjectorDefinition::new(EVENTS_BY_TYPE, json!({}), |state, _, entry| {
        let key = entry.event.event_type.as_str();
        state[key] = json!(state[key].as_u64().unwrap_or(0) + 1);
    })
    .mode(ProjectionMode::OnDemand)
}

pub fn projectors() -> Vec<ProjectorDefinition> {
    vec![
        license_counts(LICENSES_PRE_BUILT, ProjectionMode::PreBuilt),
        license_counts(LICENSES_SYNCHRONOUS, ProjectionMode::Synchronous),
        license_counts(LICENSES_ON_DEMAND, ProjectionMode::OnDemand),
        event_count(),
        events_by_type(),
    ]
}

pub fn projector(name: &str) -> Option<ProjectorDefinition> {
    projectors().into_iter().find(|p| p.name == name)
}

/// The licensing system over `store`, with every builtin projector.
pub fn system(store: Arc<EventStore>) -> Result<System, RuntimeError> {
    projectors()
        .into_iter()
        .fold(System::builder(store).aggregate(license_aggregate()), |b, p| b.projector(p))
        .build()
}

pub fn create_license(stream: &str, customer: &str, title: &str, date: &str) -> Command {
    let mut payload = Payload::new();
    payload.insert("customerId", customer);
    payload.insert("titleId", title);
    payload.insert("date", date);
    Command::new("CreateLicense", StreamId::new(stream).expect("valid stream id"), payload)
}

pub fn revoke_license(stream: &str) -> Command {
    Command::new("RevokeLicense", StreamId::new(stream).expect("valid stream id"), Payload::new())
}
