//! Protocol version 1: one JSON object per text frame.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use mutmod_core::decision::DecisionError;
use mutmod_core::engine::EngineEvent;
use mutmod_core::harness::TraceRecord;
use mutmod_core::inference::map_value;
use mutmod_core::{ActionTemplate, AutonomyMode, Engine, HumanVerdict, SlotKey};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub seq: u64,
    #[serde(default)]
    pub body: Map<String, Value>,
}

impl WireMessage {
    pub fn new(kind: impl Into<String>, body: Value) -> Self {
        let body = match body {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => [("value".to_string(), other)].into_iter().collect(),
        };
        Self {
            kind: kind.into(),
            seq: 0,
            body,
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }
}

/// Which slots a session wants to hear about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pattern {
    All,
    Slot(SlotKey),
    /// Every variable under one chain, written `[child].*`.
    Chain(mutmod_core::ModelChain),
}

impl Pattern {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s == "all" {
            return Some(Pattern::All);
        }
        if let Some(chain) = s.strip_suffix(".*") {
            return chain.parse().ok().map(Pattern::Chain);
        }
        s.parse().ok().map(Pattern::Slot)
    }

    pub fn matches(&self, slot: &SlotKey) -> bool {
        match self {
            Pattern::All => true,
            Pattern::Slot(s) => s == slot,
            Pattern::Chain(c) => &slot.chain == c,
        }
    }
}

/// A parsed client command.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Subscribe(Vec<Pattern>),
    SetMode(AutonomyMode),
    WizardDecide(ActionTemplate),
    ResolveProposal { id: String, verdict: HumanVerdict },
    Ping,
}

/// An error reply before it gets a sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct WireError {
    pub code: &'static str,
    pub message: String,
    pub reply_to: Option<u64>,
}

impl WireError {
    fn schema(reply_to: Option<u64>, message: impl Into<String>) -> Self {
        Self {
            code: "SchemaViolation",
            message: message.into(),
            reply_to,
        }
    }

    pub fn from_decision(e: &DecisionError, reply_to: u64) -> Self {
        let code = match e {
            DecisionError::WrongMode(_) => "WrongMode",
            DecisionError::UnknownProposal(_) => "UnknownProposal",
            DecisionError::AlreadyResolved(_) => "AlreadyResolved",
            DecisionError::Expired(_) => "Expired",
            _ => "Rejected",
        };
        Self {
            code,
            message: e.to_string(),
            reply_to: Some(reply_to),
        }
    }

    pub fn to_message(&self) -> WireMessage {
        WireMessage::new(
            "error",
            json!({"code": self.code, "message": self.message, "reply_to": self.reply_to}),
        )
    }
}

fn field<'a>(m: &'a Map<String, Value>, k: &str, seq: u64) -> Result<&'a Value, WireError> {
    m.get(k)
        .ok_or_else(|| WireError::schema(Some(seq), format!("missing field {k:?}")))
}

fn string_field<'a>(m: &'a Map<String, Value>, k: &str, seq: u64) -> Result<&'a str, WireError> {
    field(m, k, seq)?
        .as_str()
        .ok_or_else(|| WireError::schema(Some(seq), format!("field {k:?} must be a string")))
}

/// Parses one client frame. The error carries the command's seq when the
/// frame got far enough to have one.
pub fn parse_command(text: &str) -> Result<(u64, Command), WireError> {
    let v: Value = serde_json::from_str(text).map_err(|e| WireError::schema(None, format!("malformed frame: {e}")))?;
    let seq = v.get("seq").and_then(Value::as_u64);
    let msg: WireMessage =
        serde_json::from_value(v).map_err(|e| WireError::schema(seq, format!("malformed frame: {e}")))?;
    let seq = msg.seq;
    let b = &msg.body;
    let cmd = match msg.kind.as_str() {
        "subscribe" => {
            let raw: Vec<&str> = match (b.get("pattern"), b.get("patterns")) {
                (Some(Value::String(p)), None) => vec![p.as_str()],
                (None, Some(Value::Array(ps))) => ps
                    .iter()
                    .map(|p| {
                        p.as_str()
                            .ok_or_else(|| WireError::schema(Some(seq), "patterns must be strings"))
                    })
                    .collect::<Result<_, _>>()?,
                _ => {
                    return Err(WireError::schema(
                        Some(seq),
                        "subscribe needs a pattern string or a patterns list",
                    ))
                }
            };
            let patterns = raw
                .iter()
                .map(|p| Pattern::parse(p).ok_or_else(|| WireError::schema(Some(seq), format!("bad pattern {p:?}"))))
                .collect::<Result<_, _>>()?;
            Command::Subscribe(patterns)
        }
        "set_mode" => {
            let mode = string_field(b, "mode", seq)?;
            Command::SetMode(
                mode.parse()
                    .map_err(|_| WireError::schema(Some(seq), format!("unknown mode {mode:?}")))?,
            )
        }
        "wizard_decide" => {
            let mut action = ActionTemplate::new(string_field(b, "verb", seq)?);
            if let Some(params) = b.get("params") {
                let params = params
                    .as_object()
                    .ok_or_else(|| WireError::schema(Some(seq), "params must be an object"))?;
                for (k, v) in params {
                    let v = v
                        .as_str()
                        .ok_or_else(|| WireError::schema(Some(seq), format!("param {k:?} must be a string")))?;
                    action.params.insert(k.clone(), v.to_string());
                }
            }
            Command::WizardDecide(action)
        }
        "resolve_proposal" => {
            let id = string_field(b, "id", seq)?.to_string();
            let verdict = match string_field(b, "verdict", seq)? {
                "approve" => HumanVerdict::Approve,
                "reject" => HumanVerdict::Reject,
                other => return Err(WireError::schema(Some(seq), format!("unknown verdict {other:?}"))),
            };
            Command::ResolveProposal { id, verdict }
        }
        "ping" => Command::Ping,
        other => {
            return Err(WireError {
                code: "UnknownType",
                message: format!("unknown message type {other:?}"),
                reply_to: Some(seq),
            })
        }
    };
    Ok((seq, cmd))
}

pub fn hello(mode: AutonomyMode) -> WireMessage {
    WireMessage::new("hello", json!({"version": PROTOCOL_VERSION, "mode": mode}))
}

pub fn ack(reply_to: u64, mut extra: Map<String, Value>) -> WireMessage {
    extra.insert("reply_to".into(), reply_to.into());
    WireMessage::new("ack", Value::Object(extra))
}

fn slot_fields(slot: &SlotKey) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("slot".into(), slot.to_string().into());
    m.insert("chain".into(), slot.chain.to_string().into());
    m.insert("variable".into(), slot.variable.clone().into());
    m
}

/// Full state for a new subscriber, restricted to its patterns.
pub fn snapshot(engine: &Engine, patterns: &[Pattern]) -> WireMessage {
    let wanted = |s: &SlotKey| patterns.iter().any(|p| p.matches(s));
    let store = engine.store();
    let snap = engine.snapshot();
    let variables: Vec<Value> = store
        .declared()
        .filter(|(slot, _)| wanted(slot))
        .map(|(slot, spec)| {
            let mut m = slot_fields(&slot);
            m.insert("kind".into(), json!(spec.kind));
            m.insert("domain".into(), json!(spec.domain));
            if let Some(v) = snap.entries.get(&slot) {
                m.insert("value".into(), v.value.clone().into());
                m.insert("timestamp".into(), v.timestamp.into());
            }
            if let Some(d) = snap.posteriors.get(&slot) {
                m.insert("probs".into(), json!(d.probs));
                m.insert("map".into(), map_value(d).into());
            }
            Value::Object(m)
        })
        .collect();
    let pending: Vec<_> = engine.pipeline().pending().collect();
    WireMessage::new(
        "snapshot",
        json!({
            "mode": engine.mode(),
            "t": engine.now(),
            "variables": variables,
            "pending": pending,
        }),
    )
}

/// The broadcast frame for an engine record, with the slot it concerns.
/// Records with no operator-facing meaning map to `None`.
pub fn broadcast_frame(r: &TraceRecord) -> Option<(Option<&SlotKey>, WireMessage)> {
    let e = r.engine()?;
    let (slot, kind, body) = match e {
        EngineEvent::Commit {
            slot,
            value,
            source,
            changed: true,
        } => {
            let mut m = slot_fields(slot);
            m.insert("value".into(), value.clone().into());
            m.insert("source".into(), json!(source));
            (Some(slot), "value_changed", m)
        }
        EngineEvent::Posterior {
            slot,
            distribution,
            label,
        } => {
            let mut m = slot_fields(slot);
            m.insert("labels".into(), json!(distribution.labels));
            m.insert("probs".into(), json!(distribution.probs));
            m.insert("map".into(), label.clone().into());
            (Some(slot), "posterior", m)
        }
        EngineEvent::ProposalCreated { proposal } => (
            None,
            "proposal_created",
            json!({"proposal": proposal}).as_object()?.clone(),
        ),
        EngineEvent::ProposalResolved { id, status } => (
            None,
            "proposal_resolved",
            json!({"id": id, "status": status}).as_object()?.clone(),
        ),
        EngineEvent::ActionExecuted {
            action,
            source,
            human_reviewed,
            proposal,
        } => (
            None,
            "action_executed",
            json!({"action": action, "source": source, "human_reviewed": human_reviewed, "proposal": proposal})
                .as_object()?
                .clone(),
        ),
        _ => return None,
    };
    let mut body = body;
    body.insert("t".into(), r.t.into());
    Some((slot, WireMessage::new(kind, Value::Object(body))))
}
