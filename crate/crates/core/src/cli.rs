//! The `escore` command-line tool.
//!
//! Exit codes: 0 on success, 1 when the store rejects the request or a
//! check finds violations, 2 on usage errors, 3 when the store is corrupt.
//! With `--json` every result is printed as one JSON object per line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::builtin;
use crate::error::{EvolutionError, HarnessError, RuntimeError, SchemaError, StoreError};
use crate::event::{Event, StreamId};
use crate::evolution::{migrate, CopyTarget, MigrationContext, MigrationPlan, MigrationReport};
use crate::format::{self, decode_envelope, disk::StoreLock, manifest::MANIFEST_FILE};
use crate::harness;
use crate::runtime::{RebuildScope, System};
use crate::schema::{self, conforms_store};
use crate::store::{Degree, EventStore, ImmutabilityPolicy};

#[derive(Debug, Parser)]
#[command(name = "escore", version, about = "Administer an event store")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,

    /// Print one JSON object per line.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Create a new store.
    Init {
        path: PathBuf,
        #[arg(long, default_value = "strict")]
        policy: Degree,
        /// Store id; defaults to the directory name.
        #[arg(long)]
        id: Option<String>,
        /// Require a backup before each mutation (always on for cut-off).
        #[arg(long)]
        backup_required: bool,
        /// Allow archiving on a strict store.
        #[arg(long)]
        archival_exemption: bool,
    },
    /// Create an empty stream.
    CreateStream {
        stream: String,
        #[arg(long = "type")]
        stream_type: Option<String>,
    },
    /// Append events, expecting the stream to accept sequence `--expect` next.
    Append {
        stream: String,
        #[arg(long)]
        expect: u64,
        /// An inline event envelope or a file of envelopes, one per line.
        #[arg(long, required = true)]
        event: Vec<String>,
        /// Stream type for a stream created by this append.
        #[arg(long = "type")]
        stream_type: Option<String>,
    },
    /// Print a stream's records.
    Read {
        stream: String,
        #[arg(long, default_value_t = 1)]
        from: u64,
        /// Include archived events.
        #[arg(long)]
        stitched: bool,
    },
    /// List streams.
    Streams,
    /// Report store size.
    Stats,
    /// Check the store against a schema document.
    Validate {
        #[arg(long)]
        schema: PathBuf,
        /// Bind the schema to the store if it conforms.
        #[arg(long)]
        bind: bool,
    },
    /// Run a migration plan.
    Migrate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Rebuild a builtin projector and report how long it took.
    Rebuild {
        #[arg(long)]
        projector: String,
        /// Only these streams (per-stream projectors only).
        #[arg(long, value_delimiter = ',')]
        streams: Vec<String>,
    },
    /// Run a simulation script against the licensing domain.
    Simulate {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Move the events before `--before` to cold storage.
    Archive {
        stream: String,
        #[arg(long)]
        before: u64,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CORRUPT: i32 = 3;

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn domain(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DOMAIN,
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_USAGE => "usage",
            EXIT_CORRUPT => "corruption",
            _ => "rejected",
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let code = if e.is_corruption() { EXIT_CORRUPT } else { EXIT_DOMAIN };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> Self {
        match e {
            SchemaError::UnassignedStreamType(_) => Self::domain(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Store(e) => e.into(),
            RuntimeError::Schema(e) => e.into(),
            RuntimeError::UnknownProjector(_) | RuntimeError::UnknownQuery(_) => Self::usage(e.to_string()),
            _ => Self::domain(e.to_string()),
        }
    }
}

impl From<EvolutionError> for CliError {
    fn from(e: EvolutionError) -> Self {
        match e {
            EvolutionError::Store(e) => e.into(),
            EvolutionError::Schema(e) => e.into(),
            EvolutionError::PlanParse { .. } | EvolutionError::InvalidPlan(_) => Self::usage(e.to_string()),
            _ => Self::domain(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Runtime(e) => e.into(),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::domain(format!("i/o error: {e}"))
    }
}

type CliResult = Result<i32, CliError>;

struct Output<'a> {
    json: bool,
    out: &'a mut dyn Write,
}

impl Output<'_> {
    fn text(&mut self, line: impl AsRef<str>) -> std::io::Result<()> {
        writeln!(self.out, "{}", line.as_ref())
    }

    fn object(&mut self, value: &Value) -> std::io::Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(value).expect("values serialize"))
    }

    /// Prints `value` in JSON mode, `text` otherwise.
    fn emit(&mut self, value: Value, text: impl AsRef<str>) -> std::io::Result<()> {
        if self.json {
            self.object(&value)
        } else {
            self.text(text)
        }
    }
}

/// Runs the tool with `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let json = cli.json;
    let mut output = Output { json, out };
    match dispatch(cli, &mut output) {
        Ok(code) => code,
        Err(e) => {
            if json {
                let _ = output.object(&json!({"kind": "error", "error": e.kind(), "message": e.message}));
            }
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: Cli, out: &mut Output) -> CliResult {
    let store_path = cli.store.clone();
    let store_root = || store_path.clone().ok_or_else(|| CliError::usage("--store <path> is required"));
    match cli.command {
        Cmd::Init {
            path,
            policy,
            id,
            backup_required,
            archival_exemption,
        } => init(out, &path, policy, id, backup_required, archival_exemption),
        Cmd::CreateStream { stream, stream_type } => {
            let root = store_root()?;
            let _lock = lock(&root)?;
            let store = open(&root)?;
            let id = stream_id(&stream)?;
            store.create_stream_typed(&id, stream_type.as_deref())?;
            out.emit(
                json!({"kind": "stream", "stream": id, "type": stream_type, "length": 0}),
                format!("created stream {id}"),
            )?;
            Ok(EXIT_OK)
        }
        Cmd::Append {
            stream,
            expect,
            event,
            stream_type,
        } => {
            let root = store_root()?;
            let events = read_events(&event)?;
            let _lock = lock(&root)?;
            let store = open(&root)?;
            append(out, &store, &stream_id(&stream)?, expect, events, stream_type.as_deref())
        }
        Cmd::Read { stream, from, stitched } => {
            let store = open(&store_root()?)?;
            let id = stream_id(&stream)?;
            let entries = if stitched {
                store.read_stitched(&id)?.into_iter().filter(|e| e.sequence >= from).collect()
            } else {
                store.read(&id, from)?
            };
            out.out.write_all(&format::encode_records(&entries))?;
            Ok(EXIT_OK)
        }
        Cmd::Streams => {
            let store = open(&store_root()?)?;
            for s in store.streams() {
                out.emit(
                    json!({
                        "kind": "stream",
                        "stream": s.stream_id,
                        "type": s.stream_type,
                        "length": s.len(),
                        "archived": s.archived,
                    }),
                    format!("{}\t{}\t{}", s.stream_id, s.stream_type.as_deref().unwrap_or("-"), s.len()),
                )?;
            }
            Ok(EXIT_OK)
        }
        Cmd::Stats => {
            let store = open(&store_root()?)?;
            let stats = store.stats();
            if out.json {
                let mut value = serde_json::to_value(&stats).expect("stats serialize");
                value["kind"] = json!("stats");
                out.object(&value)?;
            } else {
                out.text(format!("streams: {}", stats.streams))?;
                out.text(format!("events: {}", stats.events))?;
                out.text(format!("archived events: {}", stats.archived_events))?;
                out.text(format!("bytes: {}", stats.bytes))?;
                for (t, n) in &stats.per_type {
                    out.text(format!("type {t}: {n}"))?;
                }
            }
            Ok(EXIT_OK)
        }
        Cmd::Validate { schema, bind } => {
            let root = store_root()?;
            let schema = schema::doc::load(&schema)?;
            let _lock = if bind { Some(lock(&root)?) } else { None };
            validate(out, &open(&root)?, schema, bind)
        }
        Cmd::Migrate { plan, dry_run } => {
            let root = store_root()?;
            let _lock = if dry_run { None } else { Some(lock(&root)?) };
            let store = open(&root)?;
            run_migration(out, &store, &plan, dry_run)
        }
        Cmd::Rebuild { projector, streams } => {
            let store = Arc::new(open(&store_root()?)?);
            rebuild(out, store, &projector, &streams)
        }
        Cmd::Simulate { script, seed } => {
            let script = harness::load_script(&script)?;
            let (_lock, store) = match &store_path {
                Some(root) => (Some(lock(root)?), open(root)?),
                None => (None, EventStore::in_memory("simulation", ImmutabilityPolicy::strict())),
            };
            let system = builtin::system(Arc::new(store))?;
            let trace = harness::run_script(&system, &script, seed)?;
            out.out.write_all(trace.to_lines().as_bytes())?;
            Ok(EXIT_OK)
        }
        Cmd::Archive { stream, before } => {
            let root = store_root()?;
            let _lock = lock(&root)?;
            let store = open(&root)?;
            let id = stream_id(&stream)?;
            let name = store.archive_cold(&id, before)?;
            out.emit(
                json!({"kind": "archive", "stream": id, "before": before, "archive": name}),
                format!("archived events of {id} before {before} to {name}"),
            )?;
            Ok(EXIT_OK)
        }
    }
}

fn init(
    out: &mut Output,
    path: &Path,
    degree: Degree,
    id: Option<String>,
    backup_required: bool,
    archival_exemption: bool,
) -> CliResult {
    let id = match id {
        Some(id) => id,
        None => path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::usage("cannot derive a store id from the path; pass --id"))?,
    };
    let policy = ImmutabilityPolicy::new(degree)
        .with_backup_required(backup_required)
        .with_archival_exemption(archival_exemption);
    let store = EventStore::create(path, id, policy)?;
    out.emit(
        json!({"kind": "store", "store_id": store.store_id(), "path": path, "policy": policy}),
        format!("initialized store {} at {} (policy {degree})", store.store_id(), path.display()),
    )?;
    Ok(EXIT_OK)
}

fn append(
    out: &mut Output,
    store: &EventStore,
    stream: &StreamId,
    expect: u64,
    events: Vec<Event>,
    stream_type: Option<&str>,
) -> CliResult {
    if expect == 1 && !store.contains_stream(stream) {
        store.ensure_stream(stream, stream_type)?;
    }
    let written = store.append(stream, expect, events)?;
    if out.json {
        out.out.write_all(&format::encode_records(&written))?;
    } else {
        let (first, last) = (written[0].sequence, written[written.len() - 1].sequence);
        out.text(format!("appended {} events to {stream} (sequences {first}..={last})", written.len()))?;
    }
    Ok(EXIT_OK)
}

/// Each argument is an inline envelope when it starts with `{`, otherwise a
/// file of envelopes, one per line.
fn read_events(args: &[String]) -> Result<Vec<Event>, CliError> {
    let mut events = Vec::new();
    for arg in args {
        if arg.trim_start().starts_with('{') {
            events.push(decode_envelope(arg.as_bytes()).map_err(|e| CliError::usage(format!("--event: {e}")))?);
            continue;
        }
        let text = std::fs::read_to_string(arg).map_err(|e| CliError::usage(format!("--event {arg}: {e}")))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event = decode_envelope(line.as_bytes())
                .map_err(|e| CliError::usage(format!("{arg} line {}: {e}", i + 1)))?;
            events.push(event);
        }
    }
    Ok(events)
}

fn validate(out: &mut Output, store: &EventStore, schema: schema::StoreSchema, bind: bool) -> CliResult {
    let result = conforms_store(store, &schema)?;
    for v in &result.violations {
        let mut value = serde_json::to_value(v).expect("violations serialize");
        value["kind"] = json!("violation");
        out.emit(value, v.to_string())?;
    }
    let conforms = result.conforms();
    out.emit(
        json!({"kind": "conformance", "schema_id": schema.schema_id, "conforms": conforms, "violations": result.violations.len()}),
        format!("conforms: {conforms}"),
    )?;
    if !conforms {
        return Ok(EXIT_DOMAIN);
    }
    if bind {
        store.bind_schema(schema)?;
    }
    Ok(EXIT_OK)
}

fn run_migration(out: &mut Output, store: &EventStore, plan_path: &Path, dry_run: bool) -> CliResult {
    let plan = MigrationPlan::load(plan_path)?;
    let base = plan_path.parent().unwrap_or(Path::new("."));
    let load_schema = |rel: &Option<String>| -> Result<_, CliError> {
        Ok(match rel {
            Some(rel) => Some(schema::doc::load(&base.join(rel))?),
            None => None,
        })
    };
    let copy_target = match &plan.target_store {
        Some(rel) => {
            let root = base.join(rel);
            let store_id = root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::usage(format!("target store path `{rel}` has no directory name")))?;
            Some(CopyTarget::Disk { root, store_id })
        }
        None => None,
    };
    let ctx = MigrationContext {
        source_schema: load_schema(&plan.source_schema)?,
        target_schema: load_schema(&plan.target_schema)?,
        copy_target,
        dry_run,
    };
    let outcome = migrate(store, &plan, ctx)?;
    print_report(out, &outcome.report)?;
    Ok(match outcome.report.conforms {
        Some(false) => EXIT_DOMAIN,
        _ => EXIT_OK,
    })
}

fn print_report(out: &mut Output, report: &MigrationReport) -> std::io::Result<()> {
    if out.json {
        for line in report.to_json_lines() {
            out.object(&line)?;
        }
        return Ok(());
    }
    let mode = if report.dry_run { " (dry run)" } else { "" };
    out.text(format!(
        "{}{mode}: {} streams, {} events read, {} mutations",
        report.technique,
        report.streams.len(),
        report.events_read,
        report.mutations()
    ))?;
    if let Some(target) = &report.target_store {
        out.text(format!("target store: {target}"))?;
    }
    if report.defaults_filled > 0 {
        out.text(format!("defaults filled: {}", report.defaults_filled))?;
    }
    for s in &report.streams {
        out.text(format!(
            "  {}: {} -> {} events (updated {}, inserted {}, deleted {})",
            s.stream, s.events_before, s.events_after, s.updated, s.inserted, s.deleted
        ))?;
        if let Some(b) = &s.backup {
            out.text(format!("    backup {}", b.as_str()))?;
        }
    }
    if let Some(conforms) = report.conforms {
        out.text(format!("conforms: {conforms}"))?;
    }
    Ok(())
}

fn rebuild(out: &mut Output, store: Arc<EventStore>, name: &str, streams: &[String]) -> CliResult {
    let def = builtin::projector(name).ok_or_else(|| {
        let known: Vec<String> = builtin::projectors().into_iter().map(|p| p.name).collect();
        CliError::usage(format!("unknown projector `{name}` (known: {})", known.join(", ")))
    })?;
    let system = System::builder(store).projector(def.clone()).build()?;
    let scope = if streams.is_empty() {
        RebuildScope::All
    } else {
        RebuildScope::Streams(streams.iter().map(|s| stream_id(s)).collect::<Result<_, _>>()?)
    };
    let report = system.rebuild(name, scope)?;
    let millis = report.duration.as_secs_f64() * 1000.0;
    out.emit(
        json!({
            "kind": "rebuild",
            "projector": report.projector,
            "streams": report.streams,
            "events": report.events,
            "duration_ms": millis,
            "result": def.respond(&report.projection.state, &Value::Null),
        }),
        format!(
            "rebuilt {}: {} events from {} streams in {millis:.1} ms",
            report.projector, report.events, report.streams
        ),
    )?;
    Ok(EXIT_OK)
}

fn stream_id(s: &str) -> Result<StreamId, CliError> {
    StreamId::new(s).map_err(|e| CliError::usage(e.to_string()))
}

fn lock(root: &Path) -> Result<StoreLock, CliError> {
    require_store(root)?;
    Ok(StoreLock::acquire(root)?)
}

fn require_store(root: &Path) -> Result<(), CliError> {
    if root.join(MANIFEST_FILE).is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("no store at {}", root.display())))
    }
}

fn open(root: &Path) -> Result<EventStore, CliError> {
    require_store(root)?;
    Ok(EventStore::open(root)?)
}
