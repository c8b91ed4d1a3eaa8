//! Evaluating scenario expectations against a trace.

use std::fmt;

use super::doc::ExpectationKind;
use super::scenario::Expectation;
use super::trace::{Trace, TraceRecord};
use crate::engine::EngineEvent;
use crate::inference::Distribution;

/// How many related records a failure lists.
pub const NEAREST_RECORDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub expectation: Expectation,
    pub passed: bool,
    pub detail: String,
    /// Records about the same subject closest in time to the expectation,
    /// filled in for failures only.
    pub nearest: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub outcomes: Vec<Outcome>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Outcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let x = &self.expectation;
        let kind = serde_json::to_value(x.kind).expect("serializable");
        let kind = kind.as_str().unwrap_or_default();
        write!(
            f,
            "{} t={} {kind} {}",
            if self.passed { "PASS" } else { "FAIL" },
            x.at,
            x.subject
        )?;
        if let Some(l) = &x.label {
            write!(f, "={l}")?;
        }
        if let Some(b) = x.bound {
            write!(f, " bound={b}")?;
        }
        write!(f, ": {}", self.detail)?;
        for r in &self.nearest {
            write!(f, "\n    nearest: {}", r.canonical())?;
        }
        Ok(())
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            writeln!(f, "{o}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} passed, {failed} failed", self.outcomes.len() - failed)
    }
}

/// Latest record at or before `at` matching `pick`.
fn latest<'a, T>(trace: &'a Trace, at: u64, mut pick: impl FnMut(&'a EngineEvent) -> Option<T>) -> Option<T> {
    trace
        .engine_events()
        .take_while(|(r, _)| r.t <= at)
        .filter_map(|(_, e)| pick(e))
        .last()
}

fn nearest(trace: &Trace, x: &Expectation) -> Vec<TraceRecord> {
    let slot = x.slot();
    let related = |r: &TraceRecord| match x.kind {
        ExpectationKind::ActionExecuted | ExpectationKind::ProposalCreated => r.verb().is_some(),
        _ => r.slot().is_some() && r.slot() == slot.as_ref(),
    };
    let mut found: Vec<&TraceRecord> = trace.records.iter().filter(|r| related(r)).collect();
    found.sort_by_key(|r| (r.t.abs_diff(x.at), r.seq));
    found.truncate(NEAREST_RECORDS);
    found.sort_by_key(|r| r.seq);
    found.into_iter().cloned().collect()
}

fn evaluate(trace: &Trace, x: &Expectation) -> (bool, String) {
    let label = x.label.as_deref().unwrap_or_default();
    match x.kind {
        ExpectationKind::ValueEquals => {
            let Some(slot) = x.slot() else {
                return (false, format!("bad subject {:?}", x.subject));
            };
            match latest(trace, x.at, |e| match e {
                EngineEvent::Commit { slot: s, value, .. } if *s == slot => Some(value),
                _ => None,
            }) {
                Some(v) if v == label => (true, format!("value is {v}")),
                Some(v) => (false, format!("value is {v}")),
                None => (false, "no value committed by then".into()),
            }
        }
        ExpectationKind::PosteriorBelow | ExpectationKind::PosteriorAbove => {
            let Some(slot) = x.slot() else {
                return (false, format!("bad subject {:?}", x.subject));
            };
            let bound = x.bound.unwrap_or(f64::NAN);
            let domain = trace.domains().remove(&slot).unwrap_or_default();
            // Perceived variables without a published posterior count as a
            // point mass on their committed value.
            let p = latest(trace, x.at, |e| match e {
                EngineEvent::Posterior {
                    slot: s, distribution, ..
                } if *s == slot => Some(distribution.clone()),
                EngineEvent::Commit { slot: s, value, .. } if *s == slot => domain
                    .iter()
                    .position(|l| l == value)
                    .map(|i| Distribution::point_mass(domain.clone(), i)),
                _ => None,
            })
            .and_then(|d| d.prob(label));
            match p {
                None => (false, "no posterior published by then".into()),
                Some(p) => {
                    let ok = if x.kind == ExpectationKind::PosteriorBelow {
                        p < bound
                    } else {
                        p > bound
                    };
                    (ok, format!("P({label}) = {p}"))
                }
            }
        }
        ExpectationKind::ActionExecuted | ExpectationKind::ProposalCreated => {
            let hit = trace
                .engine_events()
                .take_while(|(r, _)| r.t <= x.at)
                .find(|(_, e)| match (x.kind, e) {
                    (ExpectationKind::ActionExecuted, EngineEvent::ActionExecuted { action, .. }) => {
                        action.verb == x.subject
                    }
                    (ExpectationKind::ProposalCreated, EngineEvent::ProposalCreated { proposal }) => {
                        proposal.action.verb == x.subject
                    }
                    _ => false,
                });
            match hit {
                Some((r, _)) => (true, format!("seen at t={} (seq {})", r.t, r.seq)),
                None => (false, "not seen by then".into()),
            }
        }
    }
}

/// Evaluates each expectation at its own time: value and posterior checks
/// look at the latest record at or before it, action checks at any record
/// up to it.
pub fn check(trace: &Trace, expectations: &[Expectation]) -> Report {
    Report {
        outcomes: expectations
            .iter()
            .map(|x| {
                let (passed, detail) = evaluate(trace, x);
                Outcome {
                    expectation: x.clone(),
                    passed,
                    detail,
                    nearest: if passed { Vec::new() } else { nearest(trace, x) },
                }
            })
            .collect(),
    }
}
