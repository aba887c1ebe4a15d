//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`, so the lines are printed by `cargo test`
//! without `--nocapture`. The process fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use escore::builtin::{self, create_license, revoke_license};
use escore::evolution::{
    check_versioned_events, copy_transform, in_place_transform, migrate, Action, Compatibility, CopyTarget,
    MigrationContext, MigrationPlan, Technique, Upcaster, UpcasterChain,
};
use escore::format::{self, OpenOptions};
use escore::harness::{run_script, ScriptCommand, Step};
use escore::runtime::{project, CommandOutcome, ProjectionMode, Query, RebuildScope, StreamSelector, System};
use escore::schema::{conforms_store, schema_superset};
use escore::store::Edit;
use escore::{Event, EventStore, EventStream, ImmutabilityPolicy, Payload, StoreError};
use escore::error::{EvolutionError, RuntimeError};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;

fn fail(msg: impl Into<String>) -> Check {
    Err(msg.into())
}

fn policies() -> [(&'static str, ImmutabilityPolicy); 3] {
    [
        ("strict", ImmutabilityPolicy::strict()),
        ("cut_off", ImmutabilityPolicy::cut_off()),
        ("mutable", ImmutabilityPolicy::mutable()),
    ]
}

/// Every file under `root` with its bytes.
fn dir_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn disk_store(root: &Path, policy: ImmutabilityPolicy, streams: &[(String, Vec<Event>)]) -> EventStore {
    let store = EventStore::create(root, "disk", policy).unwrap();
    for (id, events) in streams {
        let id = sid(id);
        store.create_stream_typed(&id, Some("account")).unwrap();
        if !events.is_empty() {
            store.append(&id, 1, events.clone()).unwrap();
        }
    }
    store
}

// 1 ---------------------------------------------------------------------------

fn sequence_integrity() -> Check {
    const SCRIPTS: u64 = 1000;
    let mut scans = 0u64;
    let mut violations = Vec::new();
    for seed in 0..SCRIPTS {
        let mut rng = rng(0x1000_0000 + seed);
        let policy = if seed % 3 == 0 {
            ImmutabilityPolicy::mutable()
        } else {
            ImmutabilityPolicy::strict()
        };
        let dir = tempfile::tempdir().unwrap();
        let on_disk = seed % 10 == 0;
        let store = if on_disk {
            EventStore::create(dir.path(), "seq", policy).unwrap()
        } else {
            EventStore::in_memory("seq", policy)
        };
        let mut model: BTreeMap<String, Vec<Event>> = BTreeMap::new();
        for i in 0..4 {
            store.create_stream(&sid(&format!("s{i}"))).unwrap();
            model.insert(format!("s{i}"), Vec::new());
        }
        let mut counter = 0u64;
        for _ in 0..rng.gen_range(5..40) {
            let name = format!("s{}", rng.gen_range(0..4));
            let id = sid(&name);
            let m = model.get_mut(&name).unwrap();
            let len = m.len() as u64;
            let op = rng.gen_range(0..10);
            match op {
                0..=5 => {
                    let batch: Vec<Event> = (0..rng.gen_range(1..=3))
                        .map(|_| {
                            counter += 1;
                            tick(counter)
                        })
                        .collect();
                    let wrong = rng.gen_bool(0.2);
                    let supplied = if !wrong {
                        len + 1
                    } else if len > 0 && rng.gen_bool(0.5) {
                        rng.gen_range(1..=len)
                    } else {
                        len + 1 + rng.gen_range(1..4)
                    };
                    match (wrong, store.append(&id, supplied, batch.clone())) {
                        (false, Ok(written)) if is_gapless_from(&written, len + 1) => m.extend(batch),
                        (true, Err(StoreError::ConcurrencyConflict { expected, .. })) if expected == len + 1 => {}
                        (_, other) => violations.push(format!("seed {seed}: append {supplied} on {name}: {other:?}")),
                    }
                }
                6 | 7 => {
                    let from = rng.gen_range(1..=len + 2);
                    let got = store.read(&id, from).unwrap();
                    let want: Vec<&Event> = m.iter().skip(from as usize - 1).collect();
                    scans += 1;
                    if !is_gapless_from(&got, from) || got.iter().map(|e| &e.event).collect::<Vec<_>>() != want {
                        violations.push(format!("seed {seed}: read {name} from {from}"));
                    }
                }
                8 if policy.permits_mutation() => {
                    let pos = rng.gen_range(1..=len + 1);
                    counter += 1;
                    store.insert_at(&id, pos, tick(counter), None).unwrap();
                    m.insert(pos as usize - 1, tick(counter));
                }
                9 if policy.permits_mutation() && len > 0 => {
                    let pos = rng.gen_range(1..=len);
                    store.delete_at(&id, pos, None).unwrap();
                    m.remove(pos as usize - 1);
                }
                _ => {}
            }
        }
        let mut scan_all = |store: &EventStore, label: &str| {
            for (name, m) in &model {
                let got = store.read(&sid(name), 1).unwrap();
                scans += 1;
                if !is_gapless_from(&got, 1) || got.iter().map(|e| &e.event).collect::<Vec<_>>() != m.iter().collect::<Vec<_>>() {
                    violations.push(format!("seed {seed}: {label} scan of {name}: {:?}", sequences(&got)));
                }
            }
        };
        scan_all(&store, "final");
        if on_disk {
            drop(store);
            scan_all(&EventStore::open(dir.path()).unwrap(), "reopened");
        }
    }
    if violations.is_empty() {
        Ok(format!("{SCRIPTS} scripts, {scans} scans, 0 violations"))
    } else {
        fail(format!("{} violations, first: {}", violations.len(), violations[0]))
    }
}

// 2 ---------------------------------------------------------------------------

fn optimistic_concurrency() -> Check {
    const RACES: u64 = 500;
    let mut anomalies = Vec::new();
    let mut configs = 0;
    for on_disk in [false, true] {
        for (pname, policy) in policies() {
            configs += 1;
            let dir = tempfile::tempdir().unwrap();
            let store = if on_disk {
                EventStore::create(dir.path(), "race", policy).unwrap()
            } else {
                EventStore::in_memory("race", policy)
            };
            let id = sid("contested");
            store.create_stream(&id).unwrap();
            for i in 0..RACES {
                let before = store.stream_len(&id).unwrap();
                let expected = before + 1;
                let a = vec![tick(i * 10)];
                let b = vec![tick(i * 10 + 1), tick(i * 10 + 2)];
                let barrier = Barrier::new(2);
                let (ra, rb) = thread::scope(|s| {
                    let run = |events: Vec<Event>| {
                        let (store, id, barrier) = (&store, &id, &barrier);
                        move || {
                            barrier.wait();
                            store.append(id, expected, events)
                        }
                    };
                    let ha = s.spawn(run(a.clone()));
                    let hb = s.spawn(run(b.clone()));
                    (ha.join().unwrap(), hb.join().unwrap())
                });
                let label = format!("{}/{pname} race {i}", if on_disk { "disk" } else { "memory" });
                let (winner, loser_err) = match (ra, rb) {
                    (Ok(_), Err(e)) => (&a, e),
                    (Err(e), Ok(_)) => (&b, e),
                    (ra, rb) => {
                        anomalies.push(format!("{label}: {:?} / {:?}", ra.is_ok(), rb.is_ok()));
                        continue;
                    }
                };
                match loser_err {
                    StoreError::ConcurrencyConflict { expected: e, supplied, .. }
                        if e == expected + winner.len() as u64 && supplied == expected => {}
                    other => anomalies.push(format!("{label}: loser saw {other}")),
                }
                let reread: Vec<Event> = store.read(&id, expected).unwrap().into_iter().map(|e| e.event).collect();
                if &reread != winner {
                    anomalies.push(format!("{label}: re-read does not show the winner"));
                }
            }
        }
    }
    // Two clients racing the same command through the runtime.
    configs += 1;
    let system = builtin::system(Arc::new(EventStore::in_memory("cmd", ImmutabilityPolicy::strict()))).unwrap();
    for i in 0..RACES {
        let cmd = create_license(&format!("l{i}"), "c", "t", "2014-01-06");
        let barrier = Barrier::new(2);
        let outcomes = thread::scope(|s| {
            let hs: Vec<_> = (0..2)
                .map(|_| {
                    s.spawn(|| {
                        barrier.wait();
                        system.handle_command(&cmd).unwrap()
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
        });
        let appended = outcomes.iter().filter(|o| o.is_appended()).count();
        let lost_cleanly = outcomes.iter().all(|o| {
            matches!(o, CommandOutcome::Appended(_) | CommandOutcome::Conflict { .. })
                || matches!(o, CommandOutcome::Rejected(r) if r.code == "duplicate")
        });
        let len = system.store().stream_len(&cmd.target_stream).unwrap();
        if appended != 1 || !lost_cleanly || len != 1 {
            anomalies.push(format!("command race {i}: {outcomes:?}"));
        }
    }
    if anomalies.is_empty() {
        Ok(format!("{} races over {configs} configurations, 0 anomalies", RACES * configs))
    } else {
        fail(format!("{} anomalies, first: {}", anomalies.len(), anomalies[0]))
    }
}

// 3 ---------------------------------------------------------------------------

fn fold_equivalence() -> Check {
    const PAIRS: u64 = 500;
    for pair in 0..PAIRS {
        let mut rng = rng(0x3000_0000 + pair);
        let streams = gen_account_streams(&mut rng, 3, 12);
        let kind = pair as usize % PROJECTOR_KINDS;
        let def = projector(kind, "p", ProjectionMode::OnDemand);
        let store = store_with(ImmutabilityPolicy::strict(), &streams);
        let full = project(&store.streams(), &def, None).unwrap();

        if kind == 0 && full.state != json!(total_events(&streams)) {
            return fail(format!("pair {pair}: count {} != {}", full.state, total_events(&streams)));
        }
        if kind == 2 {
            let hist = type_histogram(&store.streams());
            if full.state != serde_json::to_value(&hist).unwrap() {
                return fail(format!("pair {pair}: histogram {} != {hist:?}", full.state));
            }
        }

        // Continue from a projection of random prefixes.
        let prefixes: Vec<EventStream> = store
            .streams()
            .into_iter()
            .map(|mut s| {
                let cut = rng.gen_range(0..=s.entries.len());
                s.entries.truncate(cut);
                s
            })
            .collect();
        let partial = project(&prefixes, &def, None).unwrap();
        let resumed = project(&store.streams(), &def, Some(&partial)).unwrap();
        if resumed.state != full.state || resumed.checkpoint != full.checkpoint {
            return fail(format!("pair {pair} kind {kind}: resumed {} != full {}", resumed.state, full.state));
        }

        // Live maintenance, with interleaved appends and partial deliveries.
        let live = Arc::new(EventStore::in_memory("live", ImmutabilityPolicy::strict()));
        for (id, _) in &streams {
            live.create_stream_typed(&sid(id), Some("account")).unwrap();
        }
        let system = System::builder(live.clone())
            .projector(projector(kind, "pre", ProjectionMode::PreBuilt))
            .projector(projector(kind, "sync", ProjectionMode::Synchronous))
            .aggregate(escore::runtime::AggregateDefinition::new(
                "acct",
                json!(null),
                |_, _, _| {},
                |_, cmd| {
                    let e: Event = serde_json::from_value::<Value>(cmd.payload.get("event").cloned().unwrap())
                        .map(|v| format::decode_envelope(v.to_string().as_bytes()).unwrap())
                        .unwrap();
                    Ok(vec![e])
                },
            ).handles("Record"))
            .build()
            .unwrap();
        let mut cursors: Vec<usize> = vec![0; streams.len()];
        loop {
            let open: Vec<usize> = (0..streams.len()).filter(|&i| cursors[i] < streams[i].1.len()).collect();
            let Some(&i) = open.choose(&mut rng) else { break };
            let event = &streams[i].1[cursors[i]];
            cursors[i] += 1;
            let mut payload = Payload::new();
            payload.insert("event", serde_json::from_slice::<Value>(&format::encode_envelope(event)).unwrap());
            let cmd = escore::runtime::Command::new("Record", sid(&streams[i].0), payload);
            if !system.handle_command(&cmd).unwrap().is_appended() {
                return fail(format!("pair {pair}: live append rejected"));
            }
            if rng.gen_bool(0.3) {
                system.deliver("pre", rng.gen_range(1..=3)).unwrap();
            }
            if system.window("sync").unwrap() != 0 {
                return fail(format!("pair {pair}: synchronous projector lagged"));
            }
        }
        system.quiesce().unwrap();
        for name in ["pre", "sync"] {
            let p = system.projection(name).unwrap();
            if p.state != full.state || p.checkpoint != full.checkpoint {
                return fail(format!("pair {pair} kind {kind}: {name} {} != full {}", p.state, full.state));
            }
        }
    }
    Ok(format!("{PAIRS} (stream set, projector) pairs; resumed, pre_built and synchronous states equal full rebuild"))
}

// 4 ---------------------------------------------------------------------------

fn technique_one() -> Check {
    const PAIRS: u64 = 100;
    const STORES: usize = 30;
    let mut checked = 0;
    for i in 0..PAIRS {
        let mut rng = rng(0x4000_0000 + i);
        let old = gen_schema(&mut rng);
        let new = superset_extension(&mut rng, &old);
        if !schema_superset(&old, &new) {
            return fail(format!("pair {i}: extension not recognised as superset"));
        }
        if check_versioned_events(&old, &new) != Compatibility::Compatible {
            return fail(format!("pair {i}: versioned_events rejects a superset"));
        }
        for _ in 0..STORES {
            let streams = gen_conforming_streams(&mut rng, &old);
            let store = store_from(&streams, ImmutabilityPolicy::strict());
            if !conforms_store(&store, &old).unwrap().conforms() {
                return fail(format!("pair {i}: generator produced a non-conforming store"));
            }
            let result = conforms_store(&store, &new).unwrap();
            if !result.conforms() {
                return fail(format!("pair {i}: store breaks the superset: {:?}", result.violations[0]));
            }
            checked += 1;
        }
    }
    let mut found = 0;
    let mut missing = Vec::new();
    for i in 0..PAIRS {
        let mut rng = rng(0x4100_0000 + i);
        let old = gen_schema(&mut rng);
        let (new, what) = breaking_change(&mut rng, &old);
        if schema_superset(&old, &new) {
            return fail(format!("pair {i}: breaking change `{what}` accepted as superset"));
        }
        match find_counterexample(&mut rng, &old, &new, 500) {
            Some(streams) => {
                let store = store_from(&streams, ImmutabilityPolicy::strict());
                let broken = conforms_store(&store, &new).map(|c| !c.conforms()).unwrap_or(true);
                if conforms_store(&store, &old).unwrap().conforms() && broken {
                    found += 1;
                }
            }
            None => missing.push(format!("pair {i}: {what}")),
        }
    }
    if found == PAIRS {
        Ok(format!(
            "{PAIRS} superset pairs x {STORES} stores all conform to the new schema; {found}/{PAIRS} non-superset pairs have a counterexample ({checked} stores checked)"
        ))
    } else {
        fail(format!("{found}/{PAIRS} counterexamples; missing {:?}", missing))
    }
}

// 5 ---------------------------------------------------------------------------

fn upcaster_equivalence() -> Check {
    const EVENTS: u64 = 500;
    for i in 0..EVENTS {
        let mut rng = rng(0x5000_0000 + i);
        let mut oracle: BTreeMap<String, Value> = BTreeMap::new();
        let mut v1 = Payload::new();
        for f in ["a", "b", "c"] {
            if rng.gen_bool(0.7) {
                let v = json!(rng.gen_range(0..100));
                v1.insert(f, v.clone());
                oracle.insert(f.to_string(), v);
            }
        }
        let steps = rng.gen_range(1..=4u32);
        let mut actions = Vec::new();
        for from in 1..=steps {
            let fresh = format!("f{from}");
            let existing: Vec<String> = oracle.keys().cloned().collect();
            let action = match rng.gen_range(0..3) {
                1 if !existing.is_empty() => {
                    let from_field = existing.choose(&mut rng).unwrap().clone();
                    let v = oracle.remove(&from_field).unwrap();
                    oracle.insert(fresh.clone(), v);
                    Action::RenameField { event_type: "Item".into(), from_version: from, from: from_field, to: fresh }
                }
                2 if !existing.is_empty() => {
                    let field = existing.choose(&mut rng).unwrap().clone();
                    oracle.remove(&field);
                    Action::DropField { event_type: "Item".into(), from_version: from, field }
                }
                _ => {
                    let default = json!(format!("d{from}"));
                    oracle.entry(fresh.clone()).or_insert(default.clone());
                    Action::AddField { event_type: "Item".into(), from_version: from, field: fresh, default }
                }
            };
            actions.push(action);
        }
        let chain = if i % 2 == 0 {
            actions
                .iter()
                .cloned()
                .fold(MigrationPlan::new(Technique::Upcast, 1, steps + 1), |p, a| p.action(a))
                .upcasters()
        } else {
            actions.iter().cloned().fold(UpcasterChain::new(), |chain, a| {
                let (Action::AddField { from_version, .. }
                | Action::RenameField { from_version, .. }
                | Action::DropField { from_version, .. }) = a
                else {
                    unreachable!()
                };
                chain.with(Upcaster::new("Item", from_version, move |mut e| {
                    match &a {
                        Action::AddField { field, default, .. } => {
                            if !e.payload.contains_key(field) {
                                e.payload.insert(field.clone(), default.clone());
                            }
                        }
                        Action::RenameField { from, to, .. } => {
                            if let Some(v) = e.payload.remove(from) {
                                e.payload.insert(to.clone(), v);
                            }
                        }
                        Action::DropField { field, .. } => {
                            e.payload.remove(field);
                        }
                        _ => unreachable!(),
                    }
                    e.schema_version += 1;
                    vec![e]
                }))
            })
        };
        let direct = ev("Item", steps + 1, oracle.clone().into_iter().collect());
        let got = chain.upcast_event(ev("Item", 1, v1)).map_err(|e| format!("event {i}: {e}"))?;
        if got != vec![direct.clone()] {
            return fail(format!("event {i}: chain gave {got:?}, direct {direct:?}"));
        }
        let bystander = ev("Other", 1, Payload::new());
        if chain.upcast_event(bystander.clone()).unwrap() != vec![bystander] {
            return fail(format!("event {i}: unrelated type changed"));
        }
    }

    // Purity: read and upcast activity leaves the stored bytes alone.
    let mut rng = rng(0x5100_0000);
    let dir = tempfile::tempdir().unwrap();
    let streams = gen_account_streams(&mut rng, 4, 20);
    let store = disk_store(dir.path(), ImmutabilityPolicy::mutable(), &streams);
    let hash = store.content_hash();
    let files = dir_bytes(dir.path());
    let mut reads = 0;
    for change in change_corpus() {
        let chain = change.plan.upcasters();
        for s in store.streams() {
            chain.upcast_stream(&s.entries).unwrap();
            store.read(&s.stream_id, rng.gen_range(1..=s.len() + 1)).unwrap();
            store.read_stitched(&s.stream_id).unwrap();
            store.stream_bytes(&s.stream_id).unwrap();
            reads += 4;
        }
        let mut plan = change.plan;
        plan.technique = Technique::Upcast;
        migrate(&store, &plan, MigrationContext::default()).unwrap();
    }
    if store.content_hash() != hash || dir_bytes(dir.path()) != files {
        return fail("store changed by read/upcast activity");
    }
    Ok(format!("{EVENTS} events upcast equal to direct construction; hash unchanged after {reads} reads and 10 upcast migrations"))
}

// 6 ---------------------------------------------------------------------------

fn cross_technique() -> Check {
    let corpus = change_corpus();
    let projectors = comparison_projectors();
    let mut compared = 0;
    for (i, change) in corpus.iter().enumerate() {
        let mut rng = rng(0x6000_0000 + i as u64);
        let streams = gen_account_streams(&mut rng, 4, 15);
        let source = store_with(ImmutabilityPolicy::strict(), &streams);
        let source_hash = source.content_hash();
        let chain = change.plan.upcasters();
        let view: Vec<EventStream> = source
            .streams()
            .into_iter()
            .map(|mut s| {
                s.entries = chain.upcast_stream(&s.entries).unwrap();
                s
            })
            .collect();

        let dir = tempfile::tempdir().unwrap();
        let disk_target = CopyTarget::Disk {
            root: dir.path().join("target"),
            store_id: "target".into(),
        };
        let memory_target = CopyTarget::Memory { store_id: "target".into() };
        for target in [memory_target, disk_target] {
            let (copied, _) = copy_transform(&source, &change.plan, &target, None, false)
                .map_err(|e| format!("{}: {e}", change.name))?;
            let mut copied = copied.unwrap();
            if let CopyTarget::Disk { root, .. } = &target {
                drop(copied);
                copied = EventStore::open(root).unwrap();
            }
            for def in &projectors {
                let a = project(&view, def, None).unwrap();
                let b = project(&copied.streams(), def, None).unwrap();
                if a.state != b.state || a.checkpoint != b.checkpoint {
                    return fail(format!("{}: projector {} differs: {} vs {}", change.name, def.name, a.state, b.state));
                }
                compared += 1;
            }
        }
        if source.content_hash() != source_hash {
            return fail(format!("{}: source changed", change.name));
        }
    }
    Ok(format!("{} changes x {} projectors x 2 targets: {compared} comparisons equal", corpus.len(), projectors.len()))
}

// 7 ---------------------------------------------------------------------------

fn immutability_matrix() -> Check {
    let corpus = change_corpus();
    let mut cells = 0;
    for (pname, policy) in policies() {
        for (i, change) in corpus.iter().enumerate() {
            let mut rng = rng(0x7000_0000 + i as u64);
            let streams = gen_account_streams(&mut rng, 3, 10);
            let dir = tempfile::tempdir().unwrap();
            let store = disk_store(dir.path(), policy, &streams);
            let mut plan = change.plan.clone();
            plan.technique = Technique::InPlace;
            let before = store.streams();
            let files = dir_bytes(dir.path());
            let journal_before = store.journal_len();
            let chain = plan.upcasters();
            let cell = format!("{pname} x {}", change.name);
            let result = in_place_transform(&store, &plan, None, false);
            match pname {
                "strict" => {
                    let Err(EvolutionError::Store(e @ StoreError::ImmutabilityViolation { .. })) = result else {
                        return fail(format!("{cell}: not rejected"));
                    };
                    if e.to_string() != "immutability policy 'strict' forbids in-place transformation" {
                        return fail(format!("{cell}: message `{e}`"));
                    }
                    if dir_bytes(dir.path()) != files {
                        return fail(format!("{cell}: store bytes changed"));
                    }
                }
                _ => {
                    let report = result.map_err(|e| format!("{cell}: {e}"))?;
                    for s in &before {
                        let want = chain.upcast_stream(&s.entries).unwrap();
                        if store.read(&s.stream_id, 1).unwrap() != want {
                            return fail(format!("{cell}: {} not transformed as the upcast view", s.stream_id));
                        }
                    }
                    if store.journal_len() - journal_before != report.mutations() as usize {
                        return fail(format!("{cell}: journal has {} records for {} mutations", store.journal_len() - journal_before, report.mutations()));
                    }
                    if pname == "cut_off" {
                        for sr in report.streams.iter().filter(|s| s.mutations() > 0) {
                            let Some(backup) = &sr.backup else {
                                return fail(format!("{cell}: no backup for {}", sr.stream));
                            };
                            let (id, entries) = store.restore_backup(backup).unwrap();
                            let original = before.iter().find(|s| s.stream_id == id).unwrap();
                            if entries != original.entries {
                                return fail(format!("{cell}: backup of {id} does not restore"));
                            }
                        }
                    }
                    let journal = store.journal();
                    drop(store);
                    if EventStore::open(dir.path()).unwrap().journal() != journal {
                        return fail(format!("{cell}: journal not persisted"));
                    }
                }
            }
            cells += 1;
        }
    }
    Ok(format!("3 x {} matrix, {cells} cells green", corpus.len()))
}

// 8 ---------------------------------------------------------------------------

fn checkpoint_invalidation() -> Check {
    const TRIALS: u64 = 200;
    let mut flips = 0;
    let mut untouched = 0;
    for trial in 0..TRIALS {
        let mut rng = rng(0x8000_0000 + trial);
        let streams = gen_account_streams(&mut rng, 3, 8);
        let store = Arc::new(store_with(ImmutabilityPolicy::mutable(), &streams));
        let other = sid("other-1");
        store.create_stream_typed(&other, Some("other")).unwrap();
        store.append(&other, 1, vec![tick(1), tick(2)]).unwrap();
        let account = StreamSelector::StreamType("account".into());
        let defs = vec![
            projector(0, "count", ProjectionMode::PreBuilt).selector(account.clone()),
            projector(1, "balance", ProjectionMode::Synchronous).selector(account.clone()),
            projector(4, "history", ProjectionMode::PreBuilt).selector(account.clone()),
            projector(0, "others", ProjectionMode::PreBuilt).selector(StreamSelector::StreamType("other".into())),
        ];
        let system = defs.iter().cloned().fold(System::builder(store.clone()), |b, d| b.projector(d)).build().unwrap();
        system.quiesce().unwrap();
        let covered: BTreeMap<String, bool> = defs
            .iter()
            .map(|d| (d.name.clone(), false))
            .collect();
        let candidates: Vec<_> = store.streams().into_iter().filter(|s| !s.entries.is_empty()).collect();
        let target = candidates.choose(&mut rng).unwrap().clone();
        let mut covered = covered;
        for d in &defs {
            covered.insert(d.name.clone(), system.projection(&d.name).unwrap().checkpoint_of(&target.stream_id) > 0);
        }
        let len = target.len();
        match rng.gen_range(0..4) {
            0 => store.insert_at(&target.stream_id, rng.gen_range(1..=len + 1), tick(99), None).map(|_| ()),
            1 => store.update_at(&target.stream_id, rng.gen_range(1..=len), tick(98), None).map(|_| ()),
            2 => store.delete_at(&target.stream_id, rng.gen_range(1..=len), None).map(|_| ()),
            _ => store
                .apply_edits(&target.stream_id, Some(len), None, vec![Edit::Update(1, tick(97)), Edit::Insert(len + 1, tick(96))])
                .map(|_| ()),
        }
        .unwrap();
        system.deliver("count", 10).unwrap();
        for d in &defs {
            let q = system.handle_query(&Query::new(&d.name));
            match (covered[&d.name], q) {
                (true, Err(RuntimeError::InvalidProjection { streams, .. })) if streams == vec![target.stream_id.to_string()] => {
                    flips += 1
                }
                (false, Ok(_)) => untouched += 1,
                (c, q) => return fail(format!("trial {trial}: {} covered={c} got {q:?}", d.name)),
            }
            if covered[&d.name] && system.handle_query(&Query::new(&d.name)).is_ok() {
                return fail(format!("trial {trial}: {} recovered without rebuild", d.name));
            }
        }
        for d in &defs {
            let scope = if d.name == "history" && rng.gen_bool(0.5) {
                RebuildScope::Streams(vec![target.stream_id.clone()])
            } else {
                RebuildScope::All
            };
            system.rebuild(&d.name, scope).unwrap();
            let got = system.handle_query(&Query::new(&d.name)).map_err(|e| format!("trial {trial}: {e}"))?;
            let selected: Vec<EventStream> = store
                .streams()
                .into_iter()
                .filter(|s| d.selector.matches(&s.stream_id, s.stream_type.as_deref()))
                .collect();
            if got.result != project(&selected, d, None).unwrap().state {
                return fail(format!("trial {trial}: {} after rebuild differs from recomputation", d.name));
            }
        }
    }
    Ok(format!("{TRIALS} mutations: {flips} covered projections invalidated until rebuild, {untouched} uncovered stayed valid"))
}

// 9 ---------------------------------------------------------------------------

fn gen_license_script(rng: &mut TestRng) -> Vec<Step> {
    let stream = |rng: &mut TestRng| format!("l{}", rng.gen_range(0..6));
    let command = |rng: &mut TestRng| {
        let s = stream(rng);
        let mut cmd = if rng.gen_bool(0.6) {
            create_license(&s, "c", "t", "2014-01-06")
        } else {
            revoke_license(&s)
        };
        if rng.gen_bool(0.15) {
            cmd = cmd.expecting(rng.gen_range(1..4));
        }
        cmd
    };
    let projectors = [builtin::LICENSES_PRE_BUILT, builtin::LICENSES_SYNCHRONOUS, builtin::EVENT_COUNT, builtin::LICENSES_ON_DEMAND];
    let mut script = Vec::new();
    for _ in 0..rng.gen_range(10..60) {
        let step = match rng.gen_range(0..10) {
            0..=4 => Step::Command(ScriptCommand::from(&command(rng))),
            5 => Step::DeliverRandom { max: 3 },
            6 => Step::deliver(*projectors[..3].choose(rng).unwrap(), rng.gen_range(1..4)),
            7 => Step::query(*projectors.choose(rng).unwrap()),
            8 => {
                let c = command(rng);
                Step::race(&[c.clone(), c])
            }
            _ => {
                if rng.gen_bool(0.3) {
                    Step::Quiesce
                } else {
                    Step::DeliverRandom { max: 1 }
                }
            }
        };
        script.push(step);
    }
    script.push(Step::Quiesce);
    script
}

fn eventual_consistency() -> Check {
    const SCRIPTS: u64 = 200;
    let mut lagging_traces = 0;
    let mut max_lag = 0;
    for i in 0..SCRIPTS {
        let mut rng = rng(0x9000_0000 + i);
        let script = gen_license_script(&mut rng);
        let fresh = || builtin::system(Arc::new(EventStore::in_memory("sim", ImmutabilityPolicy::strict()))).unwrap();
        let system = fresh();
        let trace = run_script(&system, &script, i).map_err(|e| format!("script {i}: {e}"))?;
        if trace.max_window(builtin::LICENSES_SYNCHRONOUS) != 0 {
            return fail(format!("script {i}: synchronous window {}", trace.max_window(builtin::LICENSES_SYNCHRONOUS)));
        }
        let lag = trace.max_window(builtin::LICENSES_PRE_BUILT).max(trace.max_window(builtin::EVENT_COUNT));
        if lag > 0 {
            lagging_traces += 1;
            max_lag = max_lag.max(lag);
        }
        let streams = system.store().streams();
        for name in [builtin::LICENSES_PRE_BUILT, builtin::EVENT_COUNT] {
            let def = builtin::projector(name).unwrap();
            let selected: Vec<EventStream> = streams
                .iter()
                .filter(|s| def.selector.matches(&s.stream_id, s.stream_type.as_deref()))
                .cloned()
                .collect();
            let on_demand = project(&selected, &def, None).unwrap();
            let pre_built = system.projection(name).unwrap();
            if pre_built.state != on_demand.state || system.window(name).unwrap() != 0 {
                return fail(format!("script {i}: {name} after quiesce {} != {}", pre_built.state, on_demand.state));
            }
        }
        let a = system.handle_query(&Query::new(builtin::LICENSES_PRE_BUILT)).unwrap().result;
        let b = system.handle_query(&Query::new(builtin::LICENSES_ON_DEMAND)).unwrap().result;
        if a != b {
            return fail(format!("script {i}: pre_built {a} != on_demand {b}"));
        }
        if run_script(&fresh(), &script, i).unwrap().to_lines() != trace.to_lines() {
            return fail(format!("script {i}: trace not deterministic"));
        }
    }
    // A query issued right after a command, before any delivery.
    let system = builtin::system(Arc::new(EventStore::in_memory("sim", ImmutabilityPolicy::strict()))).unwrap();
    let script = [
        Step::command(&create_license("l1", "BlackMirror", "TheNationalAnthemS01E01", "2014-01-06")),
        Step::query(builtin::LICENSES_PRE_BUILT),
    ];
    let trace = run_script(&system, &script, 0).unwrap();
    let q = &trace.entries[1].result;
    if q["result"] != json!({"active": 0, "revoked": 0}) || q["lag"] != json!(1) {
        return fail(format!("query before delivery returned {q}"));
    }
    if lagging_traces == 0 {
        return fail("no trace showed a pre_built window");
    }
    Ok(format!(
        "{SCRIPTS} scripts quiesce to on_demand state; synchronous window 0 throughout; pre_built window > 0 in {lagging_traces} traces (max {max_lag})"
    ))
}

// 10 --------------------------------------------------------------------------

fn format_durability() -> Check {
    const STORES: u64 = 200;
    let mut torn = 0;
    let mut boundary = 0;
    for i in 0..STORES {
        let mut rng = rng(0xA000_0000 + i);
        let (_, policy) = policies()[i as usize % 3];
        let dir = tempfile::tempdir().unwrap();
        let streams = gen_account_streams(&mut rng, 3, 10);
        let store = disk_store(dir.path(), policy, &streams);
        if policy.permits_mutation() {
            for s in store.streams().into_iter().filter(|s| !s.entries.is_empty()) {
                let backup = store.backup_stream(&s.stream_id).unwrap();
                store.update_at(&s.stream_id, 1, tick(i), Some(&backup)).unwrap();
            }
        }
        let (streams_before, hash, journal) = (store.streams(), store.content_hash(), store.journal());
        drop(store);
        let reopened = EventStore::open(dir.path()).map_err(|e| format!("store {i}: {e}"))?;
        if reopened.streams() != streams_before || reopened.content_hash() != hash || reopened.journal() != journal {
            return fail(format!("store {i}: reopen differs"));
        }
        drop(reopened);

        let Some(victim) = streams_before.iter().find(|s| !s.entries.is_empty()) else { continue };
        let path = dir.path().join(format!("{}.log", victim.stream_id));
        let bytes = std::fs::read(&path).unwrap();
        let cut = rng.gen_range(0..bytes.len());
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let complete = bytes[..cut].iter().filter(|&&b| b == b'\n').count();
        let at_boundary = cut == 0 || bytes[cut - 1] == b'\n';
        match EventStore::open(dir.path()) {
            Ok(s) if at_boundary => {
                if s.read(&victim.stream_id, 1).unwrap() != victim.entries[..complete] {
                    return fail(format!("store {i}: boundary cut lost events"));
                }
                boundary += 1;
            }
            Err(e) if !at_boundary && e.is_corruption() && e.to_string().contains(&format!("line {}", complete + 1)) => {
                let repaired = EventStore::open_with(dir.path(), OpenOptions { repair_torn_tail: true, ..Default::default() })
                    .map_err(|e| format!("store {i}: repair failed: {e}"))?;
                if repaired.read(&victim.stream_id, 1).unwrap() != victim.entries[..complete] {
                    return fail(format!("store {i}: repair kept the wrong prefix"));
                }
                torn += 1;
            }
            other => return fail(format!("store {i}: cut at {cut} gave {:?}", other.map(|_| ()))),
        }
    }

    let golden = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/license_created.log")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(EventStore::create(dir.path(), "golden", ImmutabilityPolicy::strict()).unwrap());
    let system = builtin::system(store).unwrap();
    system
        .handle_command(&create_license("license-1", "BlackMirror", "TheNationalAnthemS01E01", "2014-01-06"))
        .unwrap();
    let written = std::fs::read(dir.path().join("license-1.log")).unwrap();
    if written != golden {
        return fail(format!("golden mismatch: {}", String::from_utf8_lossy(&written)));
    }
    let decoded = format::decode_record(&golden[..golden.len() - 1]).unwrap();
    if format::encode_record(&decoded) != golden {
        return fail("golden record does not round-trip");
    }
    Ok(format!("{STORES} stores reopen equal; {torn} torn tails reported and repaired, {boundary} boundary cuts valid; golden LicenseCreated record byte-equal"))
}

// 11 --------------------------------------------------------------------------

fn scale_check() -> Check {
    const STREAMS: u64 = 100;
    const PER_STREAM: u64 = 10_000;
    const BATCH: u64 = 1_000;
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(EventStore::create(dir.path(), "scale", ImmutabilityPolicy::strict()).unwrap());
    for s in 0..STREAMS {
        let id = sid(&format!("stream-{s:03}"));
        store.create_stream(&id).unwrap();
        for b in 0..PER_STREAM / BATCH {
            let events = (0..BATCH).map(|k| tick(b * BATCH + k)).collect();
            store.append(&id, b * BATCH + 1, events).unwrap();
        }
    }
    let appended = started.elapsed();
    let system = System::builder(store.clone())
        .projector(projector(0, "count", ProjectionMode::PreBuilt))
        .build()
        .unwrap();
    let report = system.rebuild("count", RebuildScope::All).unwrap();
    let total = started.elapsed();
    let expected = STREAMS * PER_STREAM;
    if report.events != expected || report.projection.state != json!(expected) {
        return fail(format!("rebuild counted {} events, state {}", report.events, report.projection.state));
    }
    if total > Duration::from_secs(600) {
        return fail(format!("took {total:?}"));
    }
    Ok(format!(
        "{expected} events in {STREAMS} streams appended in {:.1}s; rebuild counted {} in {:.1}s; total {:.1}s",
        appended.as_secs_f64(),
        report.events,
        report.duration.as_secs_f64(),
        total.as_secs_f64()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("sequence integrity", sequence_integrity),
        ("optimistic concurrency", optimistic_concurrency),
        ("fold equivalence", fold_equivalence),
        ("technique-1 guarantee", technique_one),
        ("upcaster equivalence and purity", upcaster_equivalence),
        ("cross-technique equivalence", cross_technique),
        ("immutability policy matrix", immutability_matrix),
        ("checkpoint invalidation", checkpoint_invalidation),
        ("eventual consistency", eventual_consistency),
        ("format durability", format_durability),
        ("synthetic scale check", scale_check),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
