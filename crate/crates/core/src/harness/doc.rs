//! The line-delimited document format shared by scenarios, sensor
//! bindings, networks and rule sets.
//!
//! A document is UTF-8 text. The first non-comment line is the header
//! `{"format":"mutmod","version":"1"}`; every following non-blank line that
//! does not start with `#` is one JSON object whose `kind` field selects the
//! record type.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{ActionTemplate, AutonomyMode, Condition, HumanVerdict, RuleScope};
use crate::engine::InferenceMethod;
use crate::inference::CptRow;
use crate::perception::{Bin, GazeConfig, Scalar};
use crate::store::{SlotKey, VariableKind};

pub const FORMAT: &str = "mutmod";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DocError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: String,
}

impl Header {
    pub fn current() -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationKind {
    ValueEquals,
    PosteriorBelow,
    PosteriorAbove,
    ActionExecuted,
    ProposalCreated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Record {
    Scenario {
        name: String,
    },
    Config {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_order: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<AutonomyMode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expiry_ms: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inference: Option<InferenceMethod>,
    },
    Include {
        path: String,
    },
    Agent {
        id: String,
    },
    Variable {
        model: String,
        name: String,
        #[serde(rename = "type")]
        kind: VariableKind,
        domain: Vec<String>,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        description: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stale_after_ms: Option<u64>,
    },
    Node {
        node: SlotKey,
        #[serde(default)]
        parents: Vec<SlotKey>,
        rows: Vec<CptRow>,
    },
    Binding {
        sensor: String,
        target: SlotKey,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        field: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bins: Option<Vec<Bin>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gaze: Option<GazeConfig>,
    },
    Rule {
        name: String,
        #[serde(default)]
        scope: RuleScope,
        when: Condition,
        action: ActionTemplate,
        #[serde(default)]
        cooldown_ms: u64,
    },
    Event {
        t: u64,
        sensor: String,
        #[serde(default)]
        payload: BTreeMap<String, Scalar>,
    },
    SetMode {
        t: u64,
        mode: AutonomyMode,
    },
    Wizard {
        t: u64,
        action: ActionTemplate,
    },
    Verdict {
        t: u64,
        proposal: String,
        verdict: HumanVerdict,
    },
    Expect {
        t: u64,
        check: ExpectationKind,
        subject: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
}

/// A record and the 1-based line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Located<T> {
    pub line: usize,
    pub value: T,
}

fn is_skippable(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

fn parse_err(line: usize, e: serde_json::Error) -> DocError {
    DocError::Parse {
        line,
        column: e.column(),
        message: e.to_string(),
    }
}

/// Splits a document into its header and JSON lines, checking the header.
pub fn parse_lines<'a, H>(
    text: &'a str,
    check: impl Fn(&H) -> Result<(), String>,
) -> Result<Vec<(usize, &'a str)>, DocError>
where
    H: for<'de> Deserialize<'de>,
{
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !is_skippable(l));
    let (hline, htext) = lines.next().ok_or(DocError::Parse {
        line: 1,
        column: 1,
        message: "missing header line".into(),
    })?;
    let header: H = serde_json::from_str(htext).map_err(|e| parse_err(hline, e))?;
    check(&header).map_err(|message| DocError::Parse {
        line: hline,
        column: 1,
        message,
    })?;
    Ok(lines.collect())
}

/// Parses a document into located records.
pub fn parse_document(text: &str) -> Result<Vec<Located<Record>>, DocError> {
    let lines = parse_lines::<Header>(text, |h| {
        if h.format != FORMAT || h.version != VERSION {
            Err(format!(
                "unsupported document format {}/{} (expected {FORMAT}/{VERSION})",
                h.format, h.version
            ))
        } else {
            Ok(())
        }
    })?;
    lines
        .into_iter()
        .map(|(line, l)| {
            serde_json::from_str(l)
                .map(|value| Located { line, value })
                .map_err(|e| parse_err(line, e))
        })
        .collect()
}

/// Renders records as a document, header first.
pub fn write_document<'a>(records: impl IntoIterator<Item = &'a Record>) -> String {
    let mut out = serde_json::to_string(&Header::current()).expect("serializable");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}
