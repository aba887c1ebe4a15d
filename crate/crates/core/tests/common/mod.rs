//! Generators and oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use escore::evolution::{Action, MigrationPlan, SplitPart, Technique};
use escore::runtime::{Partitioning, ProjectionMode, ProjectorDefinition};
use escore::schema::{
    conforms_entries, conforms_streams, CohesionRule, EventSchema, FieldKind, FieldSpec, OrderingRule, StoreSchema,
    StreamSchema,
};
use escore::{Event, EventStore, EventStream, ImmutabilityPolicy, Payload, SequencedEvent, StreamId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sid(s: &str) -> StreamId {
    StreamId::new(s).unwrap()
}

pub fn ev(event_type: &str, version: u32, payload: Payload) -> Event {
    Event::new(event_type, version, payload).unwrap()
}

pub fn tick(n: u64) -> Event {
    let mut p = Payload::new();
    p.insert("n", n);
    ev("Tick", 1, p)
}

/// Sequences of a scan, as a plain list.
pub fn sequences(entries: &[SequencedEvent]) -> Vec<u64> {
    entries.iter().map(|e| e.sequence).collect()
}

/// Independent gap/duplicate check: the sequences are exactly first..first+n.
pub fn is_gapless_from(entries: &[SequencedEvent], first: u64) -> bool {
    entries
        .iter()
        .enumerate()
        .all(|(i, e)| e.sequence == first + i as u64)
}

// -- account-style events for runtime tests ---------------------------------

pub const ACCOUNT_TYPES: [&str; 4] = ["Opened", "Deposited", "Withdrawn", "Closed"];

pub fn account_event(rng: &mut TestRng) -> Event {
    let t = ACCOUNT_TYPES[rng.gen_range(0..ACCOUNT_TYPES.len())];
    let mut p = Payload::new();
    p.insert("amount", rng.gen_range(1..500i64));
    if rng.gen_bool(0.3) {
        p.insert("note", format!("n{}", rng.gen_range(0..9)));
    }
    ev(t, 1, p)
}

pub fn account_events(rng: &mut TestRng, n: usize) -> Vec<Event> {
    (0..n).map(|_| account_event(rng)).collect()
}

/// In-memory store holding `streams` (each typed `account` unless given).
pub fn store_with(policy: ImmutabilityPolicy, streams: &[(String, Vec<Event>)]) -> EventStore {
    let store = EventStore::in_memory("gen", policy);
    for (id, events) in streams {
        let id = sid(id);
        store.create_stream_typed(&id, Some("account")).unwrap();
        if !events.is_empty() {
            store.append(&id, 1, events.clone()).unwrap();
        }
    }
    store
}

pub fn gen_account_streams(rng: &mut TestRng, max_streams: usize, max_len: usize) -> Vec<(String, Vec<Event>)> {
    let n = rng.gen_range(1..=max_streams);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(0..=max_len);
            (format!("acc-{i}"), account_events(rng, len))
        })
        .collect()
}

/// A family of projectors whose results do not depend on how events of
/// different streams interleave.
pub const PROJECTOR_KINDS: usize = 6;

pub fn projector(kind: usize, name: &str, mode: ProjectionMode) -> ProjectorDefinition {
    let amount = |e: &SequencedEvent| e.event.payload.get("amount").and_then(Value::as_i64).unwrap_or(0);
    let def = match kind % PROJECTOR_KINDS {
        0 => ProjectorDefinition::new(name, json!(0), |s, _, _| *s = json!(s.as_u64().unwrap() + 1)),
        1 => ProjectorDefinition::new(name, json!(0), move |s, _, e| {
            let sign = match e.event.event_type.as_str() {
                "Deposited" => 1,
                "Withdrawn" => -1,
                _ => 0,
            };
            *s = json!(s.as_i64().unwrap() + sign * amount(e));
        }),
        2 => ProjectorDefinition::new(name, json!({}), |s, _, e| {
            let k = e.event.event_type.as_str();
            s[k] = json!(s[k].as_u64().unwrap_or(0) + 1);
        }),
        3 => ProjectorDefinition::new(name, Value::Null, move |s, _, e| *s = json!(amount(e))).per_stream(),
        4 => ProjectorDefinition::new(name, json!([]), |s, _, e| {
            s.as_array_mut()
                .unwrap()
                .push(json!([e.sequence, e.event.event_type.as_str(), e.event.payload.as_map()]));
        })
        .per_stream(),
        _ => ProjectorDefinition::new(name, json!(0), move |s, _, e| {
            *s = json!(s.as_i64().unwrap().max(amount(e)));
        }),
    };
    def.mode(mode)
}

/// Oracle for the total-count projector.
pub fn total_events(streams: &[(String, Vec<Event>)]) -> u64 {
    streams.iter().map(|(_, e)| e.len() as u64).sum()
}

// -- schema generation ------------------------------------------------------

const FIELD_NAMES: [&str; 6] = ["id", "name", "amount", "flag", "at", "tags"];

fn base_kind(rng: &mut TestRng) -> FieldKind {
    match rng.gen_range(0..5) {
        0 => FieldKind::String,
        1 => FieldKind::Integer,
        2 => FieldKind::Boolean,
        3 => FieldKind::Timestamp,
        _ => FieldKind::ListOf(Box::new(FieldKind::Integer)),
    }
}

/// A kind no value of `kind` can satisfy.
pub fn disjoint_kind(kind: &FieldKind) -> FieldKind {
    match kind {
        FieldKind::String => FieldKind::Integer,
        FieldKind::Integer | FieldKind::Decimal => FieldKind::Boolean,
        FieldKind::Boolean => FieldKind::String,
        FieldKind::Timestamp => FieldKind::Integer,
        FieldKind::ListOf(_) | FieldKind::MapOf(_) => FieldKind::String,
    }
}

pub fn value_of(rng: &mut TestRng, kind: &FieldKind) -> Value {
    match kind {
        FieldKind::String => json!(format!("s{}", rng.gen_range(0..100))),
        FieldKind::Integer => json!(rng.gen_range(-50..50i64)),
        FieldKind::Decimal => json!(rng.gen_range(0..100) as f64 / 4.0),
        FieldKind::Boolean => json!(rng.gen_bool(0.5)),
        FieldKind::Timestamp => json!(format!("2014-01-{:02}", rng.gen_range(1..29))),
        FieldKind::ListOf(inner) => {
            let n = rng.gen_range(0..3);
            Value::Array((0..n).map(|_| value_of(rng, inner)).collect())
        }
        FieldKind::MapOf(inner) => {
            let mut m = serde_json::Map::new();
            m.insert("k".into(), value_of(rng, inner));
            Value::Object(m)
        }
    }
}

fn gen_event_schema(rng: &mut TestRng, event_type: &str, version: u32) -> EventSchema {
    let mut names: Vec<&str> = FIELD_NAMES.to_vec();
    names.shuffle(rng);
    let mut es = EventSchema::new(event_type, version).strict(rng.gen_bool(0.2));
    for name in names.into_iter().take(rng.gen_range(0..=3)) {
        let kind = base_kind(rng);
        let spec = if rng.gen_bool(0.5) {
            FieldSpec::required(name, kind)
        } else {
            FieldSpec::optional(name, kind)
        };
        es = es.field(spec);
    }
    es
}

/// Event types of a generated stream type in lifecycle order.
pub fn lifecycle(ss: &StreamSchema) -> Vec<String> {
    let mut seen = Vec::new();
    for es in &ss.event_schemas {
        if !seen.contains(&es.event_type) {
            seen.push(es.event_type.clone());
        }
    }
    seen
}

const STREAM_TYPES: [&str; 3] = ["sa", "sb", "sc"];

/// A random store schema. Each stream type has event types `X0..Xn` in
/// lifecycle order, and rules drawn so that the word `X0 X1 .. Xn` is
/// always valid: `initial(X0)`, `precedes(X0, Xj)`, `at_most_once(Xj)` and
/// `terminal(Xn)` only.
pub fn gen_schema(rng: &mut TestRng) -> StoreSchema {
    let mut schema = StoreSchema::new("gen", 1);
    let stream_count = rng.gen_range(1..=STREAM_TYPES.len());
    for (i, st) in STREAM_TYPES.iter().take(stream_count).enumerate() {
        let letter = (b'A' + i as u8) as char;
        let n = rng.gen_range(1..=4);
        let types: Vec<String> = (0..n).map(|j| format!("{letter}{j}")).collect();
        let mut ss = StreamSchema::new(*st);
        for t in &types {
            for v in 1..=rng.gen_range(1..=2) {
                ss = ss.event(gen_event_schema(rng, t, v));
            }
        }
        if rng.gen_bool(0.5) {
            ss = ss.rule(OrderingRule::initial(&types[0]));
        }
        for t in types.iter().skip(1) {
            if rng.gen_bool(0.3) {
                ss = ss.rule(OrderingRule::precedes(&types[0], t));
            }
        }
        for t in &types {
            if rng.gen_bool(0.3) {
                ss = ss.rule(OrderingRule::at_most_once(t));
            }
        }
        if n >= 2 && rng.gen_bool(0.3) {
            ss = ss.rule(OrderingRule::terminal(&types[n - 1]));
        }
        schema = schema.stream(ss);
    }
    if stream_count >= 2 && rng.gen_bool(0.3) {
        schema = schema.cohesion(CohesionRule {
            stream_type: "sa".into(),
            event_type: "A0".into(),
            requires_stream_type: "sb".into(),
        });
    }
    schema.validate().unwrap();
    schema
}

pub fn gen_payload(rng: &mut TestRng, es: &EventSchema) -> Payload {
    let mut p = Payload::new();
    for f in &es.fields {
        if f.required || rng.gen_bool(0.5) {
            p.insert(f.name.clone(), value_of(rng, &f.kind));
        }
    }
    if !es.strict_content && rng.gen_bool(0.25) {
        p.insert("extra", json!(rng.gen_range(0..10)));
    }
    p
}

/// A random word over the stream type's event types, rejected until it
/// satisfies the stream schema.
pub fn gen_entries(rng: &mut TestRng, ss: &StreamSchema, max_len: usize) -> Vec<SequencedEvent> {
    let types = lifecycle(ss);
    for _ in 0..200 {
        let len = rng.gen_range(0..=max_len);
        let entries: Vec<SequencedEvent> = (0..len)
            .map(|i| {
                let t = types.choose(rng).unwrap();
                let versions: Vec<&EventSchema> = ss.event_schemas.iter().filter(|e| &e.event_type == t).collect();
                let es = versions.choose(rng).unwrap();
                SequencedEvent::new(i as u64 + 1, ev(t, es.version, gen_payload(rng, es)))
            })
            .collect();
        if conforms_entries("gen", &entries, ss).conforms() {
            return entries;
        }
    }
    Vec::new()
}

/// Streams conforming to `schema`, built by rejection sampling.
pub fn gen_conforming_streams(rng: &mut TestRng, schema: &StoreSchema) -> Vec<EventStream> {
    for _ in 0..100 {
        let mut streams = Vec::new();
        for ss in &schema.stream_schemas {
            for i in 0..rng.gen_range(0..=2) {
                let mut s = EventStream::new(sid(&format!("{}-{i}", ss.stream_type))).with_type(ss.stream_type.clone());
                s.entries = gen_entries(rng, ss, 6);
                streams.push(s);
            }
        }
        if conforms_streams(&streams, schema).unwrap().conforms() {
            return streams;
        }
    }
    Vec::new()
}

pub fn store_from(streams: &[EventStream], policy: ImmutabilityPolicy) -> EventStore {
    let store = EventStore::in_memory("gen", policy);
    for s in streams {
        store.create_stream_typed(&s.stream_id, s.stream_type.as_deref()).unwrap();
        if !s.entries.is_empty() {
            store
                .append(&s.stream_id, 1, s.entries.iter().map(|e| e.event.clone()).collect())
                .unwrap();
        }
    }
    store
}

/// Applies 1..=3 changes that keep every old stream valid.
pub fn superset_extension(rng: &mut TestRng, old: &StoreSchema) -> StoreSchema {
    let mut new = old.clone();
    for k in 0..rng.gen_range(1..=3) {
        let idx = rng.gen_range(0..new.stream_schemas.len());
        match rng.gen_range(0..5) {
            0 => {
                let ss = &mut new.stream_schemas[idx];
                let name = format!("N{k}{}", ss.stream_type);
                let types = lifecycle(ss);
                ss.event_schemas.push(gen_event_schema(rng, &name, 1));
                match rng.gen_range(0..4) {
                    0 => ss.rules.push(OrderingRule::precedes(types.choose(rng).unwrap(), &name)),
                    1 => ss.rules.push(OrderingRule::at_most_once(&name)),
                    2 => ss.rules.push(OrderingRule::terminal(&name)),
                    _ => {}
                }
            }
            1 => {
                let ss = &mut new.stream_schemas[idx];
                let t = lifecycle(ss).choose(rng).unwrap().clone();
                let top = ss.event_schemas.iter().filter(|e| e.event_type == t).map(|e| e.version).max().unwrap();
                ss.event_schemas.push(gen_event_schema(rng, &t, top + 1));
            }
            2 => {
                let st = format!("new{k}");
                if new.stream_schema(&st).is_none() {
                    let name = format!("Z{k}");
                    new = new.stream(
                        StreamSchema::new(&st)
                            .event(gen_event_schema(rng, &name, 1))
                            .rule(OrderingRule::initial(&name)),
                    );
                    new = new.cohesion(CohesionRule {
                        stream_type: st,
                        event_type: name,
                        requires_stream_type: "sa".into(),
                    });
                }
            }
            3 => {
                let ss = &mut new.stream_schemas[idx];
                if !ss.rules.is_empty() {
                    let r = rng.gen_range(0..ss.rules.len());
                    ss.rules.remove(r);
                }
            }
            _ => {
                if !new.cohesion_rules.is_empty() {
                    new.cohesion_rules.clear();
                }
            }
        }
    }
    new.validate().unwrap();
    new
}

/// One change that some store valid under `old` breaks under the result.
/// Returns the changed schema and a description.
pub fn breaking_change(rng: &mut TestRng, old: &StoreSchema) -> (StoreSchema, String) {
    loop {
        let mut new = old.clone();
        let idx = rng.gen_range(0..new.stream_schemas.len());
        let ss = new.stream_schemas[idx].clone();
        let types = lifecycle(&ss);
        let n = types.len();
        let has = |r: &OrderingRule| ss.rules.contains(r);
        let target = &mut new.stream_schemas[idx];
        let what = match rng.gen_range(0..10) {
            0 => {
                let e = rng.gen_range(0..target.event_schemas.len());
                let removed = target.event_schemas.remove(e);
                if !target.event_schemas.iter().any(|x| x.event_type == removed.event_type) {
                    target.rules.retain(|r| !r.referenced_types().contains(&removed.event_type.as_str()));
                    new.cohesion_rules.retain(|c| c.event_type != removed.event_type);
                }
                format!("remove {} v{}", removed.event_type, removed.version)
            }
            1 => {
                let candidates: Vec<(usize, usize)> = target
                    .event_schemas
                    .iter()
                    .enumerate()
                    .flat_map(|(i, es)| (0..es.fields.len()).map(move |j| (i, j)))
                    .collect();
                let Some(&(i, j)) = candidates.choose(rng) else { continue };
                let f = &mut target.event_schemas[i].fields[j];
                f.kind = disjoint_kind(&f.kind);
                format!("retype {}", f.name)
            }
            2 => {
                let es = target.event_schemas.choose_mut(rng).unwrap();
                if es.field_spec("added").is_some() {
                    continue;
                }
                es.fields.push(FieldSpec::required("added", FieldKind::String));
                format!("require added on {}", es.event_type)
            }
            3 => {
                let choices: Vec<&String> = types
                    .iter()
                    .filter(|t| !has(&OrderingRule::at_most_once(*t)) && !has(&OrderingRule::terminal(*t)))
                    .collect();
                let Some(t) = choices.choose(rng) else { continue };
                target.rules.push(OrderingRule::at_most_once(*t));
                format!("at_most_once({t})")
            }
            4 if n >= 2 => {
                let t = &types[rng.gen_range(1..n)];
                target.rules.push(OrderingRule::initial(t));
                format!("initial({t})")
            }
            5 if n >= 2 => {
                let a = &types[rng.gen_range(1..n)];
                let b = types.iter().filter(|b| *b != a).collect::<Vec<_>>().choose(rng).copied().unwrap();
                let r = OrderingRule::precedes(a, b);
                if has(&r) {
                    continue;
                }
                target.rules.push(r);
                format!("precedes({a}, {b})")
            }
            6 if n >= 2 => {
                let t = &types[rng.gen_range(0..n - 1)];
                let r = OrderingRule::terminal(t);
                if has(&r) {
                    continue;
                }
                target.rules.push(r);
                format!("terminal({t})")
            }
            7 => {
                let t = types.choose(rng).unwrap().clone();
                let rule = CohesionRule {
                    stream_type: ss.stream_type.clone(),
                    event_type: t,
                    requires_stream_type: "missing".into(),
                };
                let text = rule.to_string();
                new.cohesion_rules.push(rule);
                text
            }
            8 => {
                let st = ss.stream_type.clone();
                new.stream_schemas.remove(idx);
                new.cohesion_rules
                    .retain(|c| c.stream_type != st && c.requires_stream_type != st);
                if new.stream_schemas.is_empty() {
                    continue;
                }
                format!("remove stream type {st}")
            }
            9 => {
                let open: Vec<usize> = (0..target.event_schemas.len())
                    .filter(|&i| !target.event_schemas[i].strict_content)
                    .collect();
                let Some(&i) = open.choose(rng) else { continue };
                target.event_schemas[i].strict_content = true;
                format!("close {}", target.event_schemas[i].event_type)
            }
            _ => continue,
        };
        if new.validate().is_ok() {
            return (new, what);
        }
    }
}

/// Searches for streams valid under `old` but not under `new`.
pub fn find_counterexample(rng: &mut TestRng, old: &StoreSchema, new: &StoreSchema, tries: usize) -> Option<Vec<EventStream>> {
    (0..tries).find_map(|_| {
        let streams = gen_conforming_streams(rng, old);
        let ok = match conforms_streams(&streams, new) {
            Ok(c) => c.conforms(),
            Err(_) => false,
        };
        (!ok).then_some(streams)
    })
}

// -- schema-change corpus ---------------------------------------------------

/// One logical schema change, expressed as a plan usable by both upcasting
/// and copy-transform, plus the events of the source store.
pub struct Change {
    pub name: &'static str,
    pub plan: MigrationPlan,
}

fn plan(actions: Vec<Action>) -> MigrationPlan {
    actions
        .into_iter()
        .fold(MigrationPlan::new(Technique::CopyTransform, 1, 2), |p, a| p.action(a))
}

/// Ten changes over the account events (all at v1).
pub fn change_corpus() -> Vec<Change> {
    let add = |t: &str, f: &str, d: Value| Action::AddField {
        event_type: t.into(),
        from_version: 1,
        field: f.into(),
        default: d,
    };
    let rename = |t: &str, from: &str, to: &str| Action::RenameField {
        event_type: t.into(),
        from_version: 1,
        from: from.into(),
        to: to.into(),
    };
    let drop = |t: &str, f: &str| Action::DropField {
        event_type: t.into(),
        from_version: 1,
        field: f.into(),
    };
    let split = Action::SplitEvent {
        event_type: "Withdrawn".into(),
        from_version: 1,
        into: vec![
            SplitPart {
                event_type: "WithdrawalRequested".into(),
                version: 1,
                fields: vec!["amount".into()],
            },
            SplitPart {
                event_type: "WithdrawalBooked".into(),
                version: 1,
                fields: vec!["amount".into(), "note".into()],
            },
        ],
    };
    let add_type = Action::AddType {
        event_type: "Frozen".into(),
        version: 1,
    };
    vec![
        Change {
            name: "add currency to deposits",
            plan: plan(vec![add("Deposited", "currency", json!("EUR"))]),
        },
        Change {
            name: "add channel to every type",
            plan: plan(ACCOUNT_TYPES.iter().map(|t| add(t, "channel", json!("web"))).collect()),
        },
        Change {
            name: "rename amount on withdrawals",
            plan: plan(vec![rename("Withdrawn", "amount", "value")]),
        },
        Change {
            name: "rename note everywhere",
            plan: plan(ACCOUNT_TYPES.iter().map(|t| rename(t, "note", "memo")).collect()),
        },
        Change {
            name: "split withdrawals",
            plan: plan(vec![split.clone()]),
        },
        Change {
            name: "add a new type",
            plan: plan(vec![add_type.clone()]),
        },
        Change {
            name: "drop note from deposits",
            plan: plan(vec![drop("Deposited", "note")]),
        },
        Change {
            name: "rename then add",
            plan: plan(vec![rename("Opened", "amount", "initial"), add("Opened", "owner", json!("unknown"))]),
        },
        Change {
            name: "split and add type",
            plan: plan(vec![split, add_type]),
        },
        Change {
            name: "drop amount from closures and add reason",
            plan: plan(vec![drop("Closed", "amount"), add("Closed", "reason", json!("none"))]),
        },
    ]
}

/// Projectors compared across techniques: the full content per stream plus
/// order-insensitive aggregates.
pub fn comparison_projectors() -> Vec<ProjectorDefinition> {
    (0..PROJECTOR_KINDS)
        .map(|k| projector(k, &format!("p{k}"), ProjectionMode::OnDemand))
        .collect()
}

pub fn is_per_stream(def: &ProjectorDefinition) -> bool {
    def.partitioning == Partitioning::PerStream
}

/// Type histogram, an oracle independent of the projection machinery.
pub fn type_histogram(streams: &[EventStream]) -> BTreeMap<String, u64> {
    let mut h = BTreeMap::new();
    for s in streams {
        for e in &s.entries {
            *h.entry(e.event.event_type.to_string()).or_insert(0) += 1;
        }
    }
    h
}

pub fn stream_ids(streams: &[EventStream]) -> BTreeSet<String> {
    streams.iter().map(|s| s.stream_id.to_string()).collect()
}
