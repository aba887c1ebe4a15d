//! Read-time upcasting through chains of single-step transformers.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::EvolutionError;
use crate::event::{Event, SequencedEvent};

/// Bound on how many steps one stored event may pass through, which also
/// catches chains that cycle between types.
const MAX_STEPS: usize = 256;

pub type UpcastFn = Arc<dyn Fn(Event) -> Vec<Event> + Send + Sync>;

/// Transforms events of one type from `from_version` to `from_version + 1`.
/// The output may be empty (drop), one event, or several (split). Outputs
/// that keep the input type must carry `from_version + 1`; outputs of other
/// types continue through their own chain.
#[derive(Clone)]
pub struct Upcaster {
    pub event_type: String,
    pub from_version: u32,
    pub transform: UpcastFn,
}

impl Upcaster {
    pub fn new(
        event_type: impl Into<String>,
        from_version: u32,
        transform: impl Fn(Event) -> Vec<Event> + Send + Sync + 'static,
    ) -> Self {
        Self {
            event_type: event_type.into(),
            from_version,
            transform: Arc::new(transform),
        }
    }

    pub fn to_version(&self) -> u32 {
        self.from_version + 1
    }
}

impl fmt::Debug for Upcaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Upcaster({} v{} -> v{})", self.event_type, self.from_version, self.to_version())
    }
}

/// Upcasters keyed by (type, from_version), plus the version each type
/// should be read at.
#[derive(Clone, Debug, Default)]
pub struct UpcasterChain {
    steps: BTreeMap<(String, u32), Upcaster>,
    targets: BTreeMap<String, u32>,
}

impl UpcasterChain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a step and raises the type's target to at least its output
    /// version.
    pub fn with(mut self, upcaster: Upcaster) -> Self {
        self.add(upcaster);
        self
    }

    pub fn add(&mut self, upcaster: Upcaster) {
        let target = self.targets.entry(upcaster.event_type.clone()).or_insert(0);
        *target = (*target).max(upcaster.to_version());
        self.steps
            .insert((upcaster.event_type.clone(), upcaster.from_version), upcaster);
    }

    /// Overrides the version events of `event_type` are read at.
    pub fn target(mut self, event_type: impl Into<String>, version: u32) -> Self {
        self.targets.insert(event_type.into(), version);
        self
    }

    pub fn targets(&self) -> &BTreeMap<String, u32> {
        &self.targets
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    /// Brings one event to its target version. Types without a target pass
    /// through untouched.
    pub fn upcast_event(&self, event: Event) -> Result<Vec<Event>, EvolutionError> {
        let mut out = Vec::new();
        let mut steps = 0;
        self.upcast_into(event, &mut out, &mut steps)?;
        Ok(out)
    }

    fn upcast_into(&self, event: Event, out: &mut Vec<Event>, steps: &mut usize) -> Result<(), EvolutionError> {
        let Some(&target) = self.targets.get(event.event_type.as_str()) else {
            out.push(event);
            return Ok(());
        };
        let (event_type, version) = (event.event_type.to_string(), event.schema_version);
        if version == target {
            out.push(event);
            return Ok(());
        }
        if version > target {
            return Err(EvolutionError::UpcastContract {
                event_type,
                from_version: version,
                reason: format!("stored version is above the target version {target}"),
            });
        }
        let step = self
            .steps
            .get(&(event_type.clone(), version))
            .ok_or_else(|| EvolutionError::MissingUpcaster {
                event_type: event_type.clone(),
                from_version: version,
            })?;
        *steps += 1;
        if *steps > MAX_STEPS {
            return Err(EvolutionError::UpcastContract {
                event_type,
                from_version: version,
                reason: format!("more than {MAX_STEPS} steps; the chain cycles"),
            });
        }
        for next in (step.transform)(event) {
            if next.event_type.as_str() == event_type && next.schema_version != version + 1 {
                return Err(EvolutionError::UpcastContract {
                    event_type,
                    from_version: version,
                    reason: format!("produced v{} instead of v{}", next.schema_version, version + 1),
                });
            }
            if let Err(e) = next.validate() {
                return Err(EvolutionError::UpcastContract {
                    event_type,
                    from_version: version,
                    reason: e.to_string(),
                });
            }
            self.upcast_into(next, out, steps)?;
        }
        Ok(())
    }

    /// Upcasts the events of one stream. One-to-many and dropping steps
    /// renumber the returned view consecutively from the first entry's
    /// sequence; stored sequences are untouched.
    pub fn upcast_stream(&self, entries: &[SequencedEvent]) -> Result<Vec<SequencedEvent>, EvolutionError> {
        Ok(self.upcast_with_lineage(entries)?.0)
    }

    /// Like [`upcast_stream`](Self::upcast_stream), also returning for each
    /// input sequence the view sequences it became.
    pub fn upcast_with_lineage(
        &self,
        entries: &[SequencedEvent],
    ) -> Result<(Vec<SequencedEvent>, Vec<(u64, Vec<u64>)>), EvolutionError> {
        let mut next = entries.first().map(|e| e.sequence).unwrap_or(1);
        let mut view = Vec::with_capacity(entries.len());
        let mut lineage = Vec::with_capacity(entries.len());
        for entry in entries {
            let outs = self.upcast_event(entry.event.clone())?;
            let seqs: Vec<u64> = (next..next + outs.len() as u64).collect();
            next += outs.len() as u64;
            view.extend(seqs.iter().zip(outs).map(|(&s, e)| SequencedEvent::new(s, e)));
            lineage.push((entry.sequence, seqs));
        }
        Ok((view, lineage))
    }
}

/// Free-function form of [`UpcasterChain::upcast_stream`].
pub fn upcast_stream(entries: &[SequencedEvent], chain: &UpcasterChain) -> Result<Vec<SequencedEvent>, EvolutionError> {
    chain.upcast_stream(entries)
}
