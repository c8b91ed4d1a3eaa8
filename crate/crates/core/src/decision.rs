//! Trigger rules, proposals and the Wizard-of-Oz / mixed-initiative /
//! autonomous decision pipeline.
//!
//! Rules are threshold conditions over model snapshots. A rule that fires
//! creates a [`Proposal`], which the [`DecisionPipeline`] routes according
//! to the active [`AutonomyMode`]. Every executed or rejected decision is
//! logged as a [`DecisionRecord`] together with the committed labels at the
//! time, which is what [`learn_from_log`] trains on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ModelSnapshot, ModelStore, SlotKey, SnapshotRef};

/// Pseudo-action standing for "do nothing"; rejected proposals train it.
pub const NO_ACTION: &str = "no_action";
pub const DEFAULT_PROPOSAL_EXPIRY_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecisionError {
    #[error("condition syntax error at byte {pos}: {message}")]
    ConditionSyntax { pos: usize, message: String },
    #[error("rule {rule:?} references undeclared variable {slot}")]
    UnknownVariableInCondition { rule: String, slot: SlotKey },
    #[error("rule {rule:?} compares {slot} with unknown label {label:?}")]
    UnknownLabelInCondition { rule: String, slot: SlotKey, label: String },
    #[error("invalid rule {rule:?}: {reason}")]
    InvalidRule { rule: String, reason: String },
    #[error("operation not allowed in {0} mode")]
    WrongMode(AutonomyMode),
    #[error("unknown proposal {0:?}")]
    UnknownProposal(String),
    #[error("proposal {0:?} is already resolved")]
    AlreadyResolved(String),
    #[error("proposal {0:?} has expired")]
    Expired(String),
    #[error("no human decisions in the log")]
    NoHumanRecords,
    #[error("feature {0} has no committed value")]
    MissingFeature(SlotKey),
}

pub type Result<T, E = DecisionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutonomyMode {
    /// A human takes every decision; proposals are shown but never run.
    Wizard,
    /// Proposals wait for a human verdict.
    Mixed,
    /// Proposals are executed directly.
    Autonomous,
}

impl fmt::Display for AutonomyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AutonomyMode::Wizard => "wizard",
            AutonomyMode::Mixed => "mixed",
            AutonomyMode::Autonomous => "autonomous",
        })
    }
}

impl FromStr for AutonomyMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "wizard" => Ok(Self::Wizard),
            "mixed" => Ok(Self::Mixed),
            "autonomous" => Ok(Self::Autonomous),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Comparison {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparison::Lt => lhs < rhs,
            Comparison::Le => lhs <= rhs,
            Comparison::Gt => lhs > rhs,
            Comparison::Ge => lhs >= rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparison::Lt => "<",
            Comparison::Le => "<=",
            Comparison::Gt => ">",
            Comparison::Ge => ">=",
        }
    }
}

/// Rule condition. Text form:
///
/// ```text
/// P([child].understood_pointing = yes) < 0.3 and not value([].robot_gesture) = idle
/// ```
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Probability {
        slot: SlotKey,
        label: String,
        cmp: Comparison,
        threshold: f64,
    },
    Value {
        slot: SlotKey,
        label: String,
        negated: bool,
    },
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
    Not(Box<Condition>),
}

impl Condition {
    /// Every (slot, label) pair the condition mentions.
    pub fn references(&self) -> Vec<(&SlotKey, &str)> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<(&'a SlotKey, &'a str)>) {
        match self {
            Condition::Probability { slot, label, .. } | Condition::Value { slot, label, .. } => {
                out.push((slot, label))
            }
            Condition::And(a, b) | Condition::Or(a, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
            Condition::Not(a) => a.collect_refs(out),
        }
    }

    /// Absent values and posteriors make atoms false. Perceived variables
    /// have no posterior; their probability is the point mass on the
    /// committed value.
    pub fn holds(&self, snap: &ModelSnapshot) -> bool {
        match self {
            Condition::Probability {
                slot,
                label,
                cmp,
                threshold,
            } => {
                let p = match snap.posteriors.get(slot) {
                    Some(d) => d.prob(label),
                    None => snap.value(slot).map(|v| if v == label { 1.0 } else { 0.0 }),
                };
                p.is_some_and(|p| cmp.holds(p, *threshold))
            }
            Condition::Value { slot, label, negated } => snap.value(slot).is_some_and(|v| (v == label) != *negated),
            Condition::And(a, b) => a.holds(snap) && b.holds(snap),
            Condition::Or(a, b) => a.holds(snap) || b.holds(snap),
            Condition::Not(a) => !a.holds(snap),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Probability {
                slot,
                label,
                cmp,
                threshold,
            } => write!(f, "P({slot} = {label}) {} {threshold}", cmp.symbol()),
            Condition::Value { slot, label, negated } => {
                write!(f, "value({slot}) {} {label}", if *negated { "!=" } else { "=" })
            }
            Condition::And(a, b) => write!(f, "({a} and {b})"),
            Condition::Or(a, b) => write!(f, "({a} or {b})"),
            Condition::Not(a) => write!(f, "not {a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    Eq,
    Ne,
    Cmp(Comparison),
    Slot(String),
    Word(String),
    Number(f64),
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>> {
    let err = |pos, m: &str| DecisionError::ConditionSyntax {
        pos,
        message: m.to_string(),
    };
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let word_char = |c: u8| c.is_ascii_alphanumeric() || c == b'_' || c == b'-';
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let tok = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => {
                i += 1;
                Tok::LParen
            }
            b')' => {
                i += 1;
                Tok::RParen
            }
            b'=' => {
                i += if bytes.get(i + 1) == Some(&b'=') { 2 } else { 1 };
                Tok::Eq
            }
            b'!' if bytes.get(i + 1) == Some(&b'=') => {
                i += 2;
                Tok::Ne
            }
            b'<' | b'>' => {
                let eq = bytes.get(i + 1) == Some(&b'=');
                i += if eq { 2 } else { 1 };
                Tok::Cmp(match (c, eq) {
                    (b'<', false) => Comparison::Lt,
                    (b'<', true) => Comparison::Le,
                    (_, false) => Comparison::Gt,
                    (_, true) => Comparison::Ge,
                })
            }
            b'[' => {
                let close = src[i..]
                    .find(']')
                    .map(|o| i + o)
                    .ok_or_else(|| err(i, "unterminated chain"))?;
                i = close + 1;
                if bytes.get(i) != Some(&b'.') {
                    return Err(err(i, "expected `.variable` after chain"));
                }
                i += 1;
                while i < bytes.len() && word_char(bytes[i]) {
                    i += 1;
                }
                Tok::Slot(src[start..i].to_string())
            }
            c if c.is_ascii_digit() || c == b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || matches!(bytes[i], b'.' | b'e' | b'E')) {
                    i += 1;
                }
                let n = src[start..i].parse().map_err(|_| err(start, "malformed number"))?;
                Tok::Number(n)
            }
            c if word_char(c) => {
                while i < bytes.len() && word_char(bytes[i]) {
                    i += 1;
                }
                Tok::Word(src[start..i].to_string())
            }
            _ => return Err(err(i, "unexpected character")),
        };
        out.push((start, tok));
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn err<T>(&self, m: &str) -> Result<T> {
        let pos = self.toks.get(self.pos).map_or(self.end, |t| t.0);
        Err(DecisionError::ConditionSyntax {
            pos,
            message: m.to_string(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.1.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(&format!("expected {what}"))
        }
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w == kw)
    }

    fn expr(&mut self) -> Result<Condition> {
        let mut lhs = self.term()?;
        while self.keyword("or") {
            self.pos += 1;
            lhs = Condition::Or(Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Condition> {
        let mut lhs = self.factor()?;
        while self.keyword("and") {
            self.pos += 1;
            lhs = Condition::And(Box::new(lhs), Box::new(self.factor()?));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Condition> {
        if self.keyword("not") {
            self.pos += 1;
            return Ok(Condition::Not(Box::new(self.factor()?)));
        }
        if self.peek() == Some(&Tok::LParen) {
            self.pos += 1;
            let inner = self.expr()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(inner);
        }
        if self.keyword("P") {
            self.pos += 1;
            self.expect(Tok::LParen, "`(` after P")?;
            let slot = self.slot()?;
            self.expect(Tok::Eq, "`=`")?;
            let label = self.label()?;
            self.expect(Tok::RParen, "`)`")?;
            let Some(Tok::Cmp(cmp)) = self.next() else {
                self.pos -= 1;
                return self.err("expected one of < <= > >=");
            };
            let Some(Tok::Number(threshold)) = self.next() else {
                self.pos -= 1;
                return self.err("expected a probability");
            };
            if !(0.0..=1.0).contains(&threshold) {
                self.pos -= 1;
                return self.err("probability threshold must lie in [0, 1]");
            }
            return Ok(Condition::Probability {
                slot,
                label,
                cmp,
                threshold,
            });
        }
        if self.keyword("value") {
            self.pos += 1;
            self.expect(Tok::LParen, "`(` after value")?;
            let slot = self.slot()?;
            self.expect(Tok::RParen, "`)`")?;
            let negated = match self.next() {
                Some(Tok::Eq) => false,
                Some(Tok::Ne) => true,
                _ => {
                    self.pos -= 1;
                    return self.err("expected `=` or `!=`");
                }
            };
            let label = self.label()?;
            return Ok(Condition::Value { slot, label, negated });
        }
        self.err("expected P(...), value(...), not, or `(`")
    }

    fn slot(&mut self) -> Result<SlotKey> {
        match self.next() {
            Some(Tok::Slot(s)) => match s.parse() {
                Ok(k) => Ok(k),
                Err(e) => {
                    self.pos -= 1;
                    self.err(&e.to_string())
                }
            },
            _ => {
                self.pos -= 1;
                self.err("expected `[chain].variable`")
            }
        }
    }

    fn label(&mut self) -> Result<String> {
        match self.next() {
            Some(Tok::Word(w)) => Ok(w),
            _ => {
                self.pos -= 1;
                self.err("expected a label")
            }
        }
    }
}

impl FromStr for Condition {
    type Err = DecisionError;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = Parser {
            toks: lex(s)?,
            pos: 0,
            end: s.len(),
        };
        let c = p.expr()?;
        if p.pos < p.toks.len() {
            return p.err("trailing input");
        }
        Ok(c)
    }
}

impl Serialize for Condition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleScope {
    #[default]
    General,
    Activity,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionTemplate {
    pub verb: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl ActionTemplate {
    pub fn new(verb: impl Into<String>) -> Self {
        Self {
            verb: verb.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.params.insert(k.into(), v.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub name: String,
    #[serde(default)]
    pub scope: RuleScope,
    pub when: Condition,
    pub action: ActionTemplate,
    #[serde(default)]
    pub cooldown_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    Pending,
    Executed,
    Rejected,
    Expired,
    Suppressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub id: String,
    pub rule: String,
    pub action: ActionTemplate,
    pub created_at: u64,
    pub snapshot: SnapshotRef,
    pub status: ProposalStatus,
}

/// Rules in declaration order plus their cooldown state.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<DecisionRule>,
    last_fired: BTreeMap<String, u64>,
    next_id: u64,
}

impl RuleSet {
    /// Validates every rule against the declared variables.
    pub fn new(rules: Vec<DecisionRule>, store: &ModelStore) -> Result<Self> {
        let mut names = BTreeSet::new();
        for r in &rules {
            validate_rule(r, store)?;
            if !names.insert(r.name.as_str()) {
                return Err(DecisionError::InvalidRule {
                    rule: r.name.clone(),
                    reason: "duplicate rule name".into(),
                });
            }
        }
        Ok(Self {
            rules,
            last_fired: BTreeMap::new(),
            next_id: 0,
        })
    }

    pub fn rules(&self) -> &[DecisionRule] {
        &self.rules
    }

    /// One proposal per rule whose condition holds and whose cooldown has
    /// elapsed at the snapshot's time, in declaration order.
    pub fn evaluate(&mut self, snap: &ModelSnapshot) -> Vec<Proposal> {
        let now = snap.taken_at;
        let mut out = Vec::new();
        for rule in &self.rules {
            let cooling = self
                .last_fired
                .get(&rule.name)
                .is_some_and(|&t| now.saturating_sub(t) < rule.cooldown_ms);
            if cooling || !rule.when.holds(snap) {
                continue;
            }
            self.last_fired.insert(rule.name.clone(), now);
            self.next_id += 1;
            out.push(Proposal {
                id: format!("p{}", self.next_id),
                rule: rule.name.clone(),
                action: rule.action.clone(),
                created_at: now,
                snapshot: snap.reference(),
                status: ProposalStatus::Pending,
            });
        }
        out
    }
}

pub fn validate_rule(rule: &DecisionRule, store: &ModelStore) -> Result<()> {
    if rule.name.is_empty() || rule.action.verb.is_empty() {
        return Err(DecisionError::InvalidRule {
            rule: rule.name.clone(),
            reason: "rule name and action verb must be non-empty".into(),
        });
    }
    for (slot, label) in rule.when.references() {
        let spec = store
            .spec(slot)
            .map_err(|_| DecisionError::UnknownVariableInCondition {
                rule: rule.name.clone(),
                slot: slot.clone(),
            })?;
        if spec.label_index(label).is_none() {
            return Err(DecisionError::UnknownLabelInCondition {
                rule: rule.name.clone(),
                slot: slot.clone(),
                label: label.to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Human,
    Engine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Executed,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanVerdict {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub timestamp: u64,
    pub action: ActionTemplate,
    pub source: DecisionSource,
    /// Engine proposals that a human approved or rejected.
    #[serde(default)]
    pub human_reviewed: bool,
    pub mode: AutonomyMode,
    pub snapshot: SnapshotRef,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<String>,
    /// Committed labels at decision time, keyed by slot text.
    #[serde(default)]
    pub context: BTreeMap<String, String>,
}

impl DecisionRecord {
    /// The action this record teaches, if it reflects a human choice.
    pub fn human_label(&self) -> Option<&str> {
        match (self.source, self.verdict, self.human_reviewed) {
            (DecisionSource::Human, Verdict::Executed, _) => Some(&self.action.verb),
            (DecisionSource::Engine, Verdict::Executed, true) => Some(&self.action.verb),
            (_, Verdict::Rejected, _) => Some(NO_ACTION),
            (DecisionSource::Engine, Verdict::Executed, false) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTransition {
    pub at: u64,
    pub from: AutonomyMode,
    pub to: AutonomyMode,
}

/// Outcome of routing or resolving a proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Disposition {
    pub proposal: Proposal,
    pub record: Option<DecisionRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalCounts {
    pub created: usize,
    pub pending: usize,
    pub executed: usize,
    pub rejected: usize,
    pub expired: usize,
    pub suppressed: usize,
}

/// Proposal routing, the operator queue and the decision log.
#[derive(Debug, Clone)]
pub struct DecisionPipeline {
    mode: AutonomyMode,
    expiry_ms: u64,
    proposals: Vec<Proposal>,
    index: BTreeMap<String, usize>,
    /// (deadline, proposal index), in creation order.
    queue: Vec<(u64, usize)>,
    records: Vec<DecisionRecord>,
    transitions: Vec<ModeTransition>,
}

impl DecisionPipeline {
    pub fn new(mode: AutonomyMode, expiry_ms: u64) -> Self {
        Self {
            mode,
            expiry_ms,
            proposals: Vec::new(),
            index: BTreeMap::new(),
            queue: Vec::new(),
            records: Vec::new(),
            transitions: Vec::new(),
        }
    }

    pub fn mode(&self) -> AutonomyMode {
        self.mode
    }

    pub fn records(&self) -> &[DecisionRecord] {
        &self.records
    }

    pub fn transitions(&self) -> &[ModeTransition] {
        &self.transitions
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn proposal(&self, id: &str) -> Option<&Proposal> {
        self.index.get(id).map(|&i| &self.proposals[i])
    }

    /// Pending proposals in arrival order.
    pub fn pending(&self) -> impl Iterator<Item = &Proposal> {
        self.queue.iter().map(|&(_, i)| &self.proposals[i])
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.queue.iter().map(|(d, _)| *d).min()
    }

    pub fn counts(&self) -> ProposalCounts {
        let mut c = ProposalCounts {
            created: self.proposals.len(),
            ..Default::default()
        };
        for p in &self.proposals {
            match p.status {
                ProposalStatus::Pending => c.pending += 1,
                ProposalStatus::Executed => c.executed += 1,
                ProposalStatus::Rejected => c.rejected += 1,
                ProposalStatus::Expired => c.expired += 1,
                ProposalStatus::Suppressed => c.suppressed += 1,
            }
        }
        c
    }

    /// Switches mode and logs the transition, even when unchanged. Leaving
    /// mixed mode expires the operator queue.
    pub fn set_mode(&mut self, mode: AutonomyMode, at: u64) -> (ModeTransition, Vec<Proposal>) {
        let t = ModeTransition {
            at,
            from: self.mode,
            to: mode,
        };
        self.transitions.push(t.clone());
        self.mode = mode;
        let expired = if mode == AutonomyMode::Mixed {
            Vec::new()
        } else {
            self.expire_where(|_| true)
        };
        (t, expired)
    }

    fn record(
        &mut self,
        action: &ActionTemplate,
        source: DecisionSource,
        human_reviewed: bool,
        verdict: Verdict,
        proposal: Option<&str>,
        at: u64,
        snap: &ModelSnapshot,
    ) -> DecisionRecord {
        let r = DecisionRecord {
            timestamp: at,
            action: action.clone(),
            source,
            human_reviewed,
            mode: self.mode,
            snapshot: snap.reference(),
            verdict,
            proposal: proposal.map(str::to_string),
            context: snap.labels(),
        };
        self.records.push(r.clone());
        r
    }

    /// Routes a fresh proposal according to the active mode.
    pub fn submit_proposal(&mut self, mut p: Proposal, snap: &ModelSnapshot) -> Disposition {
        let mut record = None;
        match self.mode {
            AutonomyMode::Wizard => p.status = ProposalStatus::Suppressed,
            AutonomyMode::Mixed => p.status = ProposalStatus::Pending,
            AutonomyMode::Autonomous => {
                p.status = ProposalStatus::Executed;
                record = Some(self.record(
                    &p.action,
                    DecisionSource::Engine,
                    false,
                    Verdict::Executed,
                    Some(&p.id),
                    p.created_at,
                    snap,
                ));
            }
        }
        let i = self.proposals.len();
        self.index.insert(p.id.clone(), i);
        if p.status == ProposalStatus::Pending {
            self.queue.push((p.created_at + self.expiry_ms, i));
        }
        self.proposals.push(p.clone());
        Disposition { proposal: p, record }
    }

    /// A human executes an action directly.
    pub fn wizard_decide(&mut self, action: &ActionTemplate, at: u64, snap: &ModelSnapshot) -> Result<DecisionRecord> {
        if self.mode == AutonomyMode::Autonomous {
            return Err(DecisionError::WrongMode(self.mode));
        }
        Ok(self.record(action, DecisionSource::Human, false, Verdict::Executed, None, at, snap))
    }

    pub fn resolve_proposal(
        &mut self,
        id: &str,
        verdict: HumanVerdict,
        at: u64,
        snap: &ModelSnapshot,
    ) -> Result<Disposition> {
        let &i = self
            .index
            .get(id)
            .ok_or_else(|| DecisionError::UnknownProposal(id.to_string()))?;
        match self.proposals[i].status {
            ProposalStatus::Pending => {}
            ProposalStatus::Expired => return Err(DecisionError::Expired(id.to_string())),
            _ => return Err(DecisionError::AlreadyResolved(id.to_string())),
        }
        if self.expire_due(at).iter().any(|p| p.id == id) {
            return Err(DecisionError::Expired(id.to_string()));
        }
        if self.mode != AutonomyMode::Mixed {
            return Err(DecisionError::WrongMode(self.mode));
        }
        self.queue.retain(|&(_, q)| q != i);
        let (status, v) = match verdict {
            HumanVerdict::Approve => (ProposalStatus::Executed, Verdict::Executed),
            HumanVerdict::Reject => (ProposalStatus::Rejected, Verdict::Rejected),
        };
        self.proposals[i].status = status;
        let action = self.proposals[i].action.clone();
        let record = self.record(&action, DecisionSource::Engine, true, v, Some(id), at, snap);
        Ok(Disposition {
            proposal: self.proposals[i].clone(),
            record: Some(record),
        })
    }

    /// Expires pending proposals whose deadline is at or before `now`.
    pub fn expire_due(&mut self, now: u64) -> Vec<Proposal> {
        self.expire_where(|deadline| deadline <= now)
    }

    fn expire_where(&mut self, due: impl Fn(u64) -> bool) -> Vec<Proposal> {
        let mut out = Vec::new();
        let proposals = &mut self.proposals;
        self.queue.retain(|&(deadline, i)| {
            if due(deadline) {
                proposals[i].status = ProposalStatus::Expired;
                out.push(proposals[i].clone());
                false
            } else {
                true
            }
        });
        out
    }
}

/// Smoothed conditional action frequencies `P(action | feature tuple)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub features: Vec<SlotKey>,
    /// Sorted; always contains [`NO_ACTION`].
    pub actions: Vec<String>,
    pub alpha: f64,
    pub rows: Vec<PolicyRow>,
    /// Parameters of the first example of each verb.
    pub templates: BTreeMap<String, ActionTemplate>,
    /// Human records ignored for lacking a feature value.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub given: Vec<String>,
    pub counts: Vec<f64>,
}

impl PolicyTable {
    /// Probability row for a feature tuple; unseen tuples get the uniform
    /// smoothed row.
    pub fn distribution(&self, given: &[String]) -> Vec<f64> {
        let counts = self
            .rows
            .iter()
            .find(|r| r.given == given)
            .map(|r| r.counts.clone())
            .unwrap_or_else(|| vec![0.0; self.actions.len()]);
        let total: f64 = counts.iter().sum();
        let denom = total + self.alpha * self.actions.len() as f64;
        counts.iter().map(|c| (c + self.alpha) / denom).collect()
    }

    /// Argmax action; ties go to the lexicographically smallest verb.
    pub fn best_action(&self, given: &[String]) -> &str {
        let d = self.distribution(given);
        let mut best = 0;
        for (i, p) in d.iter().enumerate() {
            if *p > d[best] {
                best = i;
            }
        }
        &self.actions[best]
    }
}

/// Fits a policy on human-made decisions only: human-executed actions,
/// human-approved proposals, and rejections (as [`NO_ACTION`]).
pub fn learn_from_log(records: &[DecisionRecord], features: &[SlotKey], alpha: f64) -> Result<PolicyTable> {
    let labelled: Vec<(&DecisionRecord, &str)> =
        records.iter().filter_map(|r| r.human_label().map(|a| (r, a))).collect();
    if labelled.is_empty() {
        return Err(DecisionError::NoHumanRecords);
    }
    let mut actions: BTreeSet<String> = labelled.iter().map(|(_, a)| a.to_string()).collect();
    actions.insert(NO_ACTION.to_string());
    let actions: Vec<String> = actions.into_iter().collect();

    let mut templates = BTreeMap::new();
    let mut counts: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    let mut skipped = 0;
    for (r, verb) in labelled {
        let given: Option<Vec<String>> = features
            .iter()
            .map(|f| r.context.get(&f.to_string()).cloned())
            .collect();
        let Some(given) = given else {
            skipped += 1;
            continue;
        };
        if verb != NO_ACTION {
            templates.entry(verb.to_string()).or_insert_with(|| r.action.clone());
        }
        let a = actions.binary_search_by(|x| x.as_str().cmp(verb)).expect("collected");
        counts.entry(given).or_insert_with(|| vec![0.0; actions.len()])[a] += 1.0;
    }
    Ok(PolicyTable {
        features: features.to_vec(),
        actions,
        alpha,
        rows: counts
            .into_iter()
            .map(|(given, counts)| PolicyRow { given, counts })
            .collect(),
        templates,
        skipped,
    })
}

/// Picks the policy's argmax action for the snapshot's feature values;
/// `None` means [`NO_ACTION`].
pub fn select_action_autonomous(snap: &ModelSnapshot, policy: &PolicyTable) -> Result<Option<ActionTemplate>> {
    let given = policy
        .features
        .iter()
        .map(|f| {
            snap.value(f)
                .map(str::to_string)
                .ok_or_else(|| DecisionError::MissingFeature(f.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let verb = policy.best_action(&given);
    Ok((verb != NO_ACTION).then(|| {
        policy
            .templates
            .get(verb)
            .cloned()
            .unwrap_or_else(|| ActionTemplate::new(verb))
    }))
}
