//! Deterministic simulation of command handling and notification delivery.
//!
//! A script is a list of steps run one at a time against a [`System`].
//! Appends queue notifications for pre-built projectors; nothing reaches
//! them until a `deliver`, `deliver_random` or `quiesce` step. Races
//! prepare several commands against the same state and commit them in an
//! order drawn from the seed. Every step adds one line to the trace, along
//! with the inconsistency window of each pre-built and synchronous
//! projector after the step.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{HarnessError, RuntimeError};
use crate::event::{Payload, StreamId};
use crate::runtime::{Command, ProjectionMode, Query, System};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptCommand {
    #[serde(rename = "type")]
    pub command_type: String,
    pub stream: StreamId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<u64>,
    #[serde(default)]
    pub payload: Payload,
}

impl ScriptCommand {
    pub fn new(command_type: impl Into<String>, stream: StreamId, payload: Payload) -> Self {
        Self {
            command_type: command_type.into(),
            stream,
            expect: None,
            payload,
        }
    }

    pub fn to_command(&self) -> Command {
        let cmd = Command::new(self.command_type.clone(), self.stream.clone(), self.payload.clone());
        match self.expect {
            Some(n) => cmd.expecting(n),
            None => cmd,
        }
    }
}

impl From<&Command> for ScriptCommand {
    fn from(cmd: &Command) -> Self {
        Self {
            command_type: cmd.command_type.clone(),
            stream: cmd.target_stream.clone(),
            expect: cmd.expected_sequence,
            payload: cmd.payload.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    Command(ScriptCommand),
    Query {
        projector: String,
        #[serde(default, skip_serializing_if = "Value::is_null")]
        params: Value,
    },
    Deliver {
        projector: String,
        count: usize,
    },
    /// Delivers between 1 and `max` notifications to a pre-built projector
    /// with pending work, both chosen from the seed.
    DeliverRandom {
        max: usize,
    },
    Quiesce,
    Race {
        commands: Vec<ScriptCommand>,
    },
}

impl Step {
    pub fn command(cmd: &Command) -> Self {
        Step::Command(cmd.into())
    }

    pub fn query(projector: impl Into<String>) -> Self {
        Step::Query {
            projector: projector.into(),
            params: Value::Null,
        }
    }

    pub fn deliver(projector: impl Into<String>, count: usize) -> Self {
        Step::Deliver {
            projector: projector.into(),
            count,
        }
    }

    pub fn race(commands: &[Command]) -> Self {
        Step::Race {
            commands: commands.iter().map(ScriptCommand::from).collect(),
        }
    }
}

pub type Script = Vec<Step>;

/// Parses a script document: one step object per line. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_script(text: &str) -> Result<Script, HarnessError> {
    let mut steps = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let step = serde_json::from_str(trimmed).map_err(|e| HarnessError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        steps.push(step);
    }
    Ok(steps)
}

pub fn load_script(path: impl AsRef<Path>) -> Result<Script, HarnessError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| HarnessError::Parse {
        line: 0,
        reason: format!("{}: {e}", path.as_ref().display()),
    })?;
    parse_script(&text)
}

pub fn encode_script(script: &[Step]) -> String {
    script
        .iter()
        .map(|s| serde_json::to_string(s).expect("steps serialize") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub op: String,
    pub result: Value,
    pub windows: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    /// One JSON object per line.
    pub fn to_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace serializes") + "\n")
            .collect()
    }

    /// Largest window the projector showed at any trace point.
    pub fn max_window(&self, projector: &str) -> u64 {
        self.entries
            .iter()
            .filter_map(|e| e.windows.get(projector))
            .copied()
            .max()
            .unwrap_or(0)
    }

    pub fn results(&self, op: &str) -> impl Iterator<Item = &Value> {
        let op = op.to_string();
        self.entries.iter().filter(move |e| e.op == op).map(|e| &e.result)
    }
}

/// Checks that every step names a handled command type or a registered
/// projector.
pub fn check_targets(system: &System, script: &[Step]) -> Result<(), HarnessError> {
    let names = system.projector_names();
    let unknown_projector = |step: usize, name: &str| {
        if names.iter().any(|n| n == name) {
            Ok(())
        } else {
            Err(HarnessError::UnknownScriptTarget {
                step,
                what: "projector",
                name: name.to_string(),
            })
        }
    };
    let unknown_command = |step: usize, cmd: &ScriptCommand| {
        if system.handles(&cmd.command_type) {
            Ok(())
        } else {
            Err(HarnessError::UnknownScriptTarget {
                step,
                what: "command type",
                name: cmd.command_type.clone(),
            })
        }
    };
    for (i, step) in script.iter().enumerate() {
        let n = i + 1;
        match step {
            Step::Command(cmd) => unknown_command(n, cmd)?,
            Step::Race { commands } => commands.iter().try_for_each(|c| unknown_command(n, c))?,
            Step::Query { projector, .. } | Step::Deliver { projector, .. } => unknown_projector(n, projector)?,
            Step::DeliverRandom { .. } | Step::Quiesce => {}
        }
    }
    Ok(())
}

/// Runs `script` against `system`. The same seed, script and starting
/// store always produce the same trace.
pub fn run_script(system: &System, script: &[Step], seed: u64) -> Result<Trace, HarnessError> {
    check_targets(system, script)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let watched: Vec<String> = system
        .projector_names()
        .into_iter()
        .filter(|n| system.projector_mode(n).map(|m| m != ProjectionMode::OnDemand).unwrap_or(false))
        .collect();
    let pre_built: Vec<String> = watched
        .iter()
        .filter(|n| system.projector_mode(n).ok() == Some(ProjectionMode::PreBuilt))
        .cloned()
        .collect();

    let mut trace = Trace {
        seed,
        entries: Vec::with_capacity(script.len()),
    };
    for (i, step) in script.iter().enumerate() {
        let (op, result) = match step {
            Step::Command(cmd) => ("command", command_result(system.handle_command(&cmd.to_command()))),
            Step::Query { projector, params } => {
                let query = Query::new(projector.clone()).with_params(params.clone());
                let result = match system.handle_query(&query) {
                    Ok(r) => json!({
                        "projector": r.projector,
                        "result": r.result,
                        "checkpoint": r.checkpoint,
                        "lag": system.window(projector)?,
                    }),
                    Err(e) => error_json(&e),
                };
                ("query", result)
            }
            Step::Deliver { projector, count } => {
                let delivered = system.deliver(projector, *count)?;
                ("deliver", json!({"projector": projector, "delivered": delivered}))
            }
            Step::DeliverRandom { max } => {
                let mut ready = Vec::new();
                for name in &pre_built {
                    if system.pending(name)? > 0 {
                        ready.push(name);
                    }
                }
                let result = match ready.choose(&mut rng) {
                    Some(name) => {
                        let k = rng.gen_range(1..=(*max).max(1));
                        json!({"projector": name, "delivered": system.deliver(name, k)?})
                    }
                    None => json!({"projector": null, "delivered": 0}),
                };
                ("deliver_random", result)
            }
            Step::Quiesce => ("quiesce", json!({"delivered": system.quiesce()?})),
            Step::Race { commands } => ("race", race(system, commands, &mut rng)?),
        };
        let mut windows = BTreeMap::new();
        for name in &watched {
            windows.insert(name.clone(), system.window(name)?);
        }
        trace.entries.push(TraceEntry {
            step: i + 1,
            op: op.to_string(),
            result,
            windows,
        });
    }
    Ok(trace)
}

/// Prepares every command against the current state, then commits them in
/// a seeded order. Outcomes are listed in script order.
fn race(system: &System, commands: &[ScriptCommand], rng: &mut ChaCha8Rng) -> Result<Value, HarnessError> {
    let mut prepared = Vec::with_capacity(commands.len());
    for cmd in commands {
        prepared.push(Some(system.prepare_command(&cmd.to_command())?));
    }
    let mut order: Vec<usize> = (0..commands.len()).collect();
    order.shuffle(rng);
    let mut outcomes = vec![Value::Null; commands.len()];
    for &i in &order {
        let p = prepared[i].take().expect("each command commits once");
        outcomes[i] = command_result(system.commit_prepared(p));
    }
    Ok(json!({"order": order, "outcomes": outcomes}))
}

fn command_result(outcome: Result<crate::runtime::CommandOutcome, RuntimeError>) -> Value {
    match outcome {
        Ok(o) => o.to_json(),
        Err(e) => error_json(&e),
    }
}

fn error_json(e: &RuntimeError) -> Value {
    let kind = match e {
        RuntimeError::InvalidProjection { .. } => "invalid_projection",
        RuntimeError::NonConformingEvent { .. } => "non_conforming_event",
        _ => "error",
    };
    json!({"error": kind, "message": e.to_string()})
}
