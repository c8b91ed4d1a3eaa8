//! Deterministic replay of a scenario on a virtual clock.

use std::time::{Duration, Instant};

use super::scenario::{Input, Scenario, TimelineEntry};
use super::trace::{HarnessEvent, Trace, TraceEvent, TraceRecord};
use crate::decision::DecisionError;
use crate::engine::{BuildError, Engine};

/// An engine plus the trace being written for it.
///
/// The CLI replays whole timelines through it; the server feeds it live
/// operator commands as well.
#[derive(Debug)]
pub struct Replay {
    engine: Engine,
    trace: Trace,
    inputs: usize,
    timings: Vec<Duration>,
}

impl Replay {
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Self, BuildError> {
        let engine = scenario.engine(seed)?;
        let mut replay = Self {
            engine,
            trace: Trace::default(),
            inputs: 0,
            timings: Vec::new(),
        };
        let d = &scenario.declarations;
        replay.push(
            0,
            None,
            TraceEvent::Harness(HarnessEvent::Loaded {
                scenario: scenario.name.clone(),
                seed,
                mode: d.mode,
                agents: d.agents.clone(),
                nodes: d.nodes.len(),
                rules: d.rules.len(),
            }),
        );
        let declared: Vec<_> = replay
            .engine
            .store()
            .declared()
            .map(|(slot, spec)| HarnessEvent::Declared {
                slot,
                kind: spec.kind,
                domain: spec.domain.clone(),
            })
            .collect();
        for d in declared {
            replay.push(0, None, TraceEvent::Harness(d));
        }
        Ok(replay)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Wall-clock processing time of each sensor event so far.
    pub fn timings(&self) -> &[Duration] {
        &self.timings
    }

    fn push(&mut self, t: u64, cause: Option<usize>, event: TraceEvent) {
        let seq = self.trace.records.len() as u64;
        self.trace.records.push(TraceRecord { seq, t, cause, event });
    }

    fn collect(&mut self, cause: Option<usize>) {
        for (t, e) in self.engine.drain_events() {
            self.push(t, cause, TraceEvent::Engine(e));
        }
    }

    /// Fires proposal deadlines up to and including `t`, each at its own
    /// virtual time.
    pub fn advance_to(&mut self, t: u64) {
        while let Some(d) = self.engine.next_deadline().filter(|&d| d <= t) {
            self.engine.advance_to(d);
            self.collect(None);
        }
        self.engine.advance_to(t);
        self.collect(None);
    }

    /// Applies one input and returns the records it produced, starting
    /// with the input record itself. Times before the engine clock are
    /// clamped to it.
    pub fn apply(&mut self, entry: &TimelineEntry) -> &[TraceRecord] {
        self.apply_command(entry).0
    }

    /// Like [`apply`](Self::apply), also returning why an operator command
    /// was refused. The refusal is in the trace either way.
    pub fn apply_command(&mut self, entry: &TimelineEntry) -> (&[TraceRecord], Option<DecisionError>) {
        let t = entry.t.max(self.engine.now());
        self.advance_to(t);
        let cause = Some(self.inputs);
        self.inputs += 1;
        let start = self.trace.records.len();
        let entry = TimelineEntry {
            t,
            input: entry.input.clone(),
        };
        self.push(
            t,
            cause,
            TraceEvent::Harness(HarnessEvent::Input { entry: entry.clone() }),
        );
        let refused = match &entry.input {
            Input::Event { .. } => {
                let ev = entry.raw_event().expect("event entry");
                let clock = Instant::now();
                self.engine.ingest(&ev);
                self.timings.push(clock.elapsed());
                None
            }
            Input::SetMode { mode } => {
                self.engine.set_mode(*mode, t);
                None
            }
            Input::Wizard { action } => self.engine.wizard_decide(action, t).err(),
            Input::Verdict { proposal, verdict } => self.engine.resolve_proposal(proposal, *verdict, t).err(),
        };
        self.collect(cause);
        (&self.trace.records[start..], refused)
    }

    /// Expires whatever is still pending and returns the trace.
    pub fn finish(mut self) -> Trace {
        self.flush();
        self.trace
    }

    /// Drives virtual time through every remaining proposal deadline.
    pub fn flush(&mut self) -> &[TraceRecord] {
        let start = self.trace.records.len();
        while let Some(d) = self.engine.next_deadline() {
            self.advance_to(d);
        }
        &self.trace.records[start..]
    }

    /// Engine events emitted since the last collection, without a cause.
    pub fn collect_pending(&mut self) -> &[TraceRecord] {
        let start = self.trace.records.len();
        self.collect(None);
        &self.trace.records[start..]
    }
}

/// Replays the whole timeline. Only an invalid scenario fails.
pub fn run(scenario: &Scenario, seed: u64) -> Result<Trace, BuildError> {
    run_timed(scenario, seed).map(|(t, _)| t)
}

/// Like [`run`], also returning per-event processing times.
pub fn run_timed(scenario: &Scenario, seed: u64) -> Result<(Trace, Vec<Duration>), BuildError> {
    let mut r = Replay::new(scenario, seed)?;
    for e in &scenario.timeline {
        r.apply(e);
    }
    let timings = r.timings.clone();
    Ok((r.finish(), timings))
}
