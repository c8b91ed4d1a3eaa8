//! Scenario scripts, deterministic replay, traces and expectation checks.

pub mod check;
pub mod doc;
pub mod fixtures;
pub mod gen;
pub mod run;
pub mod scenario;
pub mod trace;

pub use check::{check, Outcome, Report};
pub use doc::{parse_document, write_document, DocError, ExpectationKind, Record};
pub use run::{run, run_timed, Replay};
pub use scenario::{load_scenario, parse_scenario, Expectation, Input, LoadError, Scenario, TimelineEntry};
pub use trace::{export_trace, import_trace, HarnessEvent, Trace, TraceError, TraceEvent, TraceRecord};
