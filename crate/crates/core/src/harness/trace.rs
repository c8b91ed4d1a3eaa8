//! Replay traces and their canonical, digestible serialization.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::doc::{parse_lines, DocError};
use super::scenario::TimelineEntry;
use crate::decision::{AutonomyMode, DecisionRecord, DecisionSource};
use crate::engine::EngineEvent;
use crate::inference::Assignment;
use crate::store::{SlotKey, VariableKind};

pub const TRACE_FORMAT: &str = "mutmod-trace";
pub const TRACE_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] DocError),
    #[error("trace has no digest line")]
    MissingDigest,
    #[error("digest mismatch: file says {stated}, content hashes to {actual}")]
    DigestMismatch { stated: String, actual: String },
}

/// Records the harness adds around engine events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum HarnessEvent {
    Loaded {
        scenario: String,
        seed: u64,
        mode: AutonomyMode,
        agents: Vec<String>,
        nodes: usize,
        rules: usize,
    },
    Declared {
        slot: SlotKey,
        kind: VariableKind,
        domain: Vec<String>,
    },
    Input {
        entry: TimelineEntry,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceEvent {
    Harness(HarnessEvent),
    Engine(EngineEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    /// Virtual time.
    pub t: u64,
    /// Index of the timeline entry that caused this record; `None` for
    /// initialization and timer-driven records.
    pub cause: Option<usize>,
    pub event: TraceEvent,
}

impl TraceRecord {
    pub fn engine(&self) -> Option<&EngineEvent> {
        match &self.event {
            TraceEvent::Engine(e) => Some(e),
            TraceEvent::Harness(_) => None,
        }
    }

    /// The slot this record concerns, if any.
    pub fn slot(&self) -> Option<&SlotKey> {
        match &self.event {
            TraceEvent::Engine(
                EngineEvent::Commit { slot, .. }
                | EngineEvent::Notification { slot, .. }
                | EngineEvent::Posterior { slot, .. },
            ) => Some(slot),
            TraceEvent::Engine(EngineEvent::Diagnostic { slot, .. }) => slot.as_ref(),
            TraceEvent::Harness(HarnessEvent::Declared { slot, .. }) => Some(slot),
            _ => None,
        }
    }

    /// The action verb this record concerns, if any.
    pub fn verb(&self) -> Option<&str> {
        match &self.event {
            TraceEvent::Engine(EngineEvent::ActionExecuted { action, .. }) => Some(&action.verb),
            TraceEvent::Engine(EngineEvent::ProposalCreated { proposal }) => Some(&proposal.action.verb),
            _ => None,
        }
    }

    /// Canonical one-line JSON: sorted keys, shortest round-trip floats.
    pub fn canonical(&self) -> String {
        canonical_json(self)
    }
}

pub(crate) fn canonical_json<T: Serialize>(v: &T) -> String {
    // Converting through `Value` sorts object keys.
    let value = serde_json::to_value(v).expect("trace records serialize");
    serde_json::to_string(&value).expect("values serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceHeader {
    format: String,
    version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DigestLine {
    digest: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    fn header_line() -> String {
        canonical_json(&TraceHeader {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION.into(),
        })
    }

    /// Header and records, one per line; the digest covers exactly this.
    fn body(&self) -> String {
        let mut out = Self::header_line();
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.canonical());
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }

    /// The full file text, including the terminal digest line.
    pub fn to_text(&self) -> String {
        let body = self.body();
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        let mut out = body;
        out.push_str(&canonical_json(&DigestLine { digest }));
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TraceError> {
        let lines = parse_lines::<TraceHeader>(text, |h| {
            if h.format == TRACE_FORMAT && h.version == TRACE_VERSION {
                Ok(())
            } else {
                Err(format!(
                    "unsupported trace format {}/{} (expected {TRACE_FORMAT}/{TRACE_VERSION})",
                    h.format, h.version
                ))
            }
        })?;
        let Some((&(dline, dtext), rest)) = lines.split_last() else {
            return Err(TraceError::MissingDigest);
        };
        let stated: DigestLine = serde_json::from_str(dtext).map_err(|e| DocError::Parse {
            line: dline,
            column: e.column(),
            message: format!("expected digest line: {e}"),
        })?;
        let records = rest
            .iter()
            .map(|&(line, l)| {
                serde_json::from_str(l).map_err(|e| DocError::Parse {
                    line,
                    column: e.column(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<TraceRecord>, _>>()?;
        let trace = Trace { records };
        let actual = trace.digest();
        if actual != stated.digest {
            return Err(TraceError::DigestMismatch {
                stated: stated.digest,
                actual,
            });
        }
        Ok(trace)
    }

    pub fn engine_events(&self) -> impl Iterator<Item = (&TraceRecord, &EngineEvent)> {
        self.records.iter().filter_map(|r| r.engine().map(|e| (r, e)))
    }

    /// Executed actions the engine decided on its own.
    pub fn engine_actions(&self) -> usize {
        self.engine_events().filter(|(_, e)| is_engine_action(e)).count()
    }

    /// The decision log, in order.
    pub fn decision_records(&self) -> Vec<DecisionRecord> {
        self.engine_events()
            .filter_map(|(_, e)| match e {
                EngineEvent::Decision { record } => Some(record.clone()),
                _ => None,
            })
            .collect()
    }

    /// Declared domains, from the initialization records.
    pub fn domains(&self) -> BTreeMap<SlotKey, Vec<String>> {
        self.records
            .iter()
            .filter_map(|r| match &r.event {
                TraceEvent::Harness(HarnessEvent::Declared { slot, domain, .. }) => {
                    Some((slot.clone(), domain.clone()))
                }
                _ => None,
            })
            .collect()
    }

    /// The committed state after each sensor-event entry, one assignment
    /// per entry. Useful as training data for `fit_cpt`.
    pub fn joint_assignments(&self) -> Vec<Assignment> {
        let mut state = Assignment::new();
        let mut out = Vec::new();
        let mut current: Option<usize> = None;
        let mut flush = |state: &Assignment, current: &mut Option<usize>| {
            if current.take().is_some() {
                out.push(state.clone());
            }
        };
        for r in &self.records {
            match &r.event {
                TraceEvent::Harness(HarnessEvent::Input { entry }) => {
                    flush(&state, &mut current);
                    if matches!(entry.input, super::scenario::Input::Event { .. }) {
                        current = r.cause;
                    }
                }
                TraceEvent::Engine(EngineEvent::Commit { slot, value, .. }) => {
                    state.insert(slot.clone(), value.clone());
                }
                _ => {}
            }
        }
        flush(&state, &mut current);
        out
    }
}

/// True for an action the engine executed without human review.
pub fn is_engine_action(e: &EngineEvent) -> bool {
    matches!(
        e,
        EngineEvent::ActionExecuted {
            source: DecisionSource::Engine,
            human_reviewed: false,
            ..
        }
    )
}

/// Writes the canonical trace file.
pub fn export_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(trace.to_text().as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Reads a trace file and verifies its digest.
pub fn import_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    Trace::from_text(&std::fs::read_to_string(path)?)
}
