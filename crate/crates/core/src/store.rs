//! Agent registry and nested model store.
//!
//! A model is addressed by a [`ModelChain`]: the ordered list of observers
//! whose nested perspective the model represents. The empty chain is the
//! engine's own ego model, `[child]` is the engine's model of the child and
//! `[child,robot]` is the robot as perceived by the child.
//!
//! Every model holds declared variables (perceived or abstract) with their
//! latest committed value. Commits that change a value are fanned out to
//! watchers, in registration order, on the writer's thread.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver, Sender};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::Distribution;

/// Default bound on model order.
pub const DEFAULT_MAX_ORDER: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("malformed agent id {0:?}")]
    MalformedAgentId(String),
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("chain {chain} has order {order}, above the configured maximum {max}")]
    OrderExceeded {
        chain: ModelChain,
        order: usize,
        max: usize,
    },
    #[error("invalid variable spec {name:?}: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("variable {0} already declared with a different kind or domain")]
    ConflictingSpec(SlotKey),
    #[error("unknown variable {0}")]
    UnknownVariable(SlotKey),
    #[error("value {value:?} is not in the domain of {slot}")]
    ValueOutOfDomain { slot: SlotKey, value: String },
    #[error("timestamp {attempted} precedes last commit at {last} for {slot}")]
    TimestampRegression { slot: SlotKey, last: u64, attempted: u64 },
    #[error("{writer:?} may not write {kind:?} variable {slot}")]
    KindSourceMismatch {
        slot: SlotKey,
        kind: VariableKind,
        writer: Source,
    },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Case-sensitive agent identifier: letters, digits, `_` and `-`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AgentId(String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if is_token(&id) {
            Ok(Self(id))
        } else {
            Err(StoreError::MalformedAgentId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AgentId {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<AgentId> for String {
    fn from(a: AgentId) -> String {
        a.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered observers naming a nested model. Its length is the model order.
///
/// The text form is `[a,b]`, with `[]` for the ego model.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelChain(Vec<AgentId>);

impl ModelChain {
    pub fn ego() -> Self {
        Self(Vec::new())
    }

    pub fn new(observers: Vec<AgentId>) -> Self {
        Self(observers)
    }

    /// Builds a chain from raw tokens, validating each id.
    pub fn parse_ids<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ids.into_iter().map(AgentId::new).collect::<Result<Vec<_>>>().map(Self)
    }

    pub fn observers(&self) -> &[AgentId] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn is_ego(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ModelChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(a.as_str())?;
        }
        f.write_str("]")
    }
}

impl FromStr for ModelChain {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| StoreError::MalformedAgentId(s.to_string()))?;
        if inner.trim().is_empty() {
            return Ok(Self::ego());
        }
        Self::parse_ids(inner.split(',').map(|t| t.trim().to_string()))
    }
}

/// A variable inside one model, written `[chain].name`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotKey {
    pub chain: ModelChain,
    pub variable: String,
}

impl SlotKey {
    pub fn new(chain: ModelChain, variable: impl Into<String>) -> Self {
        Self {
            chain,
            variable: variable.into(),
        }
    }
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.chain, self.variable)
    }
}

impl FromStr for SlotKey {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let close = s.find(']').ok_or_else(|| StoreError::MalformedAgentId(s.to_string()))?;
        let chain: ModelChain = s[..=close].parse()?;
        let variable = s[close + 1..]
            .strip_prefix('.')
            .filter(|v| is_token(v))
            .ok_or_else(|| StoreError::InvalidSpec {
                name: s.to_string(),
                reason: "expected `[chain].variable`".into(),
            })?;
        Ok(Self::new(chain, variable))
    }
}

impl Serialize for SlotKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SlotKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    /// Measurable from sensors.
    Perceived,
    /// Mental state, written only by inference.
    Abstract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Perception,
    Inference,
    Harness,
}

impl Source {
    fn may_write(self, kind: VariableKind) -> bool {
        match kind {
            VariableKind::Perceived => matches!(self, Source::Perception | Source::Harness),
            VariableKind::Abstract => self == Source::Inference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    /// Ordered category labels; order breaks ties.
    pub domain: Vec<String>,
    #[serde(default)]
    pub description: String,
    /// Values older than this are treated as absent by inference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale_after_ms: Option<u64>,
}

impl VariableSpec {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        kind: VariableKind,
        domain: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            domain: domain.into_iter().map(Into::into).collect(),
            description: String::new(),
            stale_after_ms: None,
        }
    }

    pub fn perceived<S: Into<String>>(name: impl Into<String>, domain: impl IntoIterator<Item = S>) -> Self {
        Self::new(name, VariableKind::Perceived, domain)
    }

    pub fn abstract_var<S: Into<String>>(name: impl Into<String>, domain: impl IntoIterator<Item = S>) -> Self {
        Self::new(name, VariableKind::Abstract, domain)
    }

    pub fn with_description(mut self, d: impl Into<String>) -> Self {
        self.description = d.into();
        self
    }

    pub fn with_staleness(mut self, ms: u64) -> Self {
        self.stale_after_ms = Some(ms);
        self
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.domain.iter().position(|l| l == label)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| StoreError::InvalidSpec {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if !is_token(&self.name) {
            return Err(invalid("name must be a non-empty token"));
        }
        if self.domain.len() < 2 {
            return Err(invalid("domain needs at least two labels"));
        }
        let mut seen = BTreeSet::new();
        for label in &self.domain {
            if label.is_empty() {
                return Err(invalid("empty domain label"));
            }
            if !seen.insert(label) {
                return Err(invalid("duplicate domain label"));
            }
        }
        Ok(())
    }

    fn compatible(&self, other: &VariableSpec) -> bool {
        self.kind == other.kind && self.domain == other.domain
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableValue {
    pub value: String,
    pub timestamp: u64,
    pub source: Source,
}

/// Delivered to watchers for every value-changing commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub slot: SlotKey,
    pub old: Option<String>,
    pub new: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WatchId(u64);

/// Receiving end of a [`ModelStore::watch`] subscription.
#[derive(Debug)]
pub struct Subscription {
    id: WatchId,
    rx: Receiver<Notification>,
}

impl Subscription {
    pub fn id(&self) -> WatchId {
        self.id
    }

    /// Drains everything delivered so far.
    pub fn drain(&self) -> Vec<Notification> {
        self.rx.try_iter().collect()
    }
}

/// Result of one commit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitOutcome {
    pub changed: bool,
    pub previous: Option<String>,
    pub delivered: usize,
}

/// Handle to a resolved model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelHandle {
    pub chain: ModelChain,
    pub order: usize,
}

#[derive(Debug, Clone)]
struct Slot {
    spec: VariableSpec,
    value: Option<VariableValue>,
}

struct Watcher {
    id: WatchId,
    slot: SlotKey,
    tx: Sender<Notification>,
}

/// Identifies a snapshot: the virtual time it was taken and the commit
/// counter at that time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub taken_at: u64,
    pub version: u64,
}

/// Immutable point-in-time copy of every committed value and published
/// posterior.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSnapshot {
    pub taken_at: u64,
    pub version: u64,
    pub entries: BTreeMap<SlotKey, VariableValue>,
    pub posteriors: BTreeMap<SlotKey, Distribution>,
}

impl ModelSnapshot {
    pub fn reference(&self) -> SnapshotRef {
        SnapshotRef {
            taken_at: self.taken_at,
            version: self.version,
        }
    }

    pub fn value(&self, slot: &SlotKey) -> Option<&str> {
        self.entries.get(slot).map(|v| v.value.as_str())
    }

    /// Committed labels keyed by slot text, as carried by decision records.
    pub fn labels(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.value.clone()))
            .collect()
    }
}

/// Registry of agents and nested models.
///
/// Owned by a single writer; readers get [`ModelSnapshot`]s.
pub struct ModelStore {
    max_order: usize,
    agents: BTreeSet<AgentId>,
    models: BTreeMap<ModelChain, BTreeMap<String, Slot>>,
    posteriors: BTreeMap<SlotKey, Distribution>,
    watchers: Vec<Watcher>,
    next_watch: u64,
    version: u64,
    now: u64,
}

impl Default for ModelStore {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_ORDER)
    }
}

impl fmt::Debug for ModelStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelStore")
            .field("max_order", &self.max_order)
            .field("agents", &self.agents)
            .field("models", &self.models.len())
            .field("watchers", &self.watchers.len())
            .field("now", &self.now)
            .finish()
    }
}

impl ModelStore {
    pub fn new(max_order: usize) -> Self {
        Self {
            max_order,
            agents: BTreeSet::new(),
            models: BTreeMap::new(),
            posteriors: BTreeMap::new(),
            watchers: Vec::new(),
            next_watch: 0,
            version: 0,
            now: 0,
        }
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentId> {
        self.agents.iter()
    }

    pub fn register_agent(&mut self, id: &str) -> Result<AgentId> {
        let id = AgentId::new(id)?;
        self.agents.insert(id.clone());
        Ok(id)
    }

    pub fn is_registered(&self, id: &AgentId) -> bool {
        self.agents.contains(id)
    }

    fn check_agents(&self, chain: &ModelChain) -> Result<()> {
        match chain.observers().iter().find(|a| !self.agents.contains(*a)) {
            Some(a) => Err(StoreError::UnknownAgent(a.to_string())),
            None => Ok(()),
        }
    }

    pub fn order(&self, chain: &ModelChain) -> Result<usize> {
        self.check_agents(chain)?;
        Ok(chain.order())
    }

    /// Returns the model addressed by `chain`, creating it if absent.
    pub fn resolve_model(&mut self, chain: &ModelChain) -> Result<ModelHandle> {
        self.check_agents(chain)?;
        if chain.order() > self.max_order {
            return Err(StoreError::OrderExceeded {
                chain: chain.clone(),
                order: chain.order(),
                max: self.max_order,
            });
        }
        self.models.entry(chain.clone()).or_default();
        Ok(ModelHandle {
            chain: chain.clone(),
            order: chain.order(),
        })
    }

    pub fn declare_variable(&mut self, chain: &ModelChain, spec: VariableSpec) -> Result<SlotKey> {
        spec.validate()?;
        self.resolve_model(chain)?;
        let key = SlotKey::new(chain.clone(), spec.name.clone());
        let model = self.models.get_mut(chain).expect("resolved above");
        match model.get(&spec.name) {
            Some(existing) if existing.spec.compatible(&spec) => Ok(key),
            Some(_) => Err(StoreError::ConflictingSpec(key)),
            None => {
                model.insert(spec.name.clone(), Slot { spec, value: None });
                Ok(key)
            }
        }
    }

    fn slot(&self, key: &SlotKey) -> Result<&Slot> {
        self.models
            .get(&key.chain)
            .and_then(|m| m.get(&key.variable))
            .ok_or_else(|| StoreError::UnknownVariable(key.clone()))
    }

    pub fn spec(&self, key: &SlotKey) -> Result<&VariableSpec> {
        self.slot(key).map(|s| &s.spec)
    }

    /// Every declared slot with its spec, in key order.
    pub fn declared(&self) -> impl Iterator<Item = (SlotKey, &VariableSpec)> {
        self.models.iter().flat_map(|(chain, vars)| {
            vars.values()
                .map(move |s| (SlotKey::new(chain.clone(), s.spec.name.clone()), &s.spec))
        })
    }

    pub fn commit_value(
        &mut self,
        key: &SlotKey,
        value: &str,
        timestamp: u64,
        source: Source,
    ) -> Result<CommitOutcome> {
        let slot = self.slot(key)?;
        if slot.spec.label_index(value).is_none() {
            return Err(StoreError::ValueOutOfDomain {
                slot: key.clone(),
                value: value.to_string(),
            });
        }
        if !source.may_write(slot.spec.kind) {
            return Err(StoreError::KindSourceMismatch {
                slot: key.clone(),
                kind: slot.spec.kind,
                writer: source,
            });
        }
        if let Some(prev) = &slot.value {
            if timestamp < prev.timestamp {
                return Err(StoreError::TimestampRegression {
                    slot: key.clone(),
                    last: prev.timestamp,
                    attempted: timestamp,
                });
            }
        }

        let slot = self
            .models
            .get_mut(&key.chain)
            .and_then(|m| m.get_mut(&key.variable))
            .expect("checked above");
        let previous = slot.value.as_ref().map(|v| v.value.clone());
        let changed = previous.as_deref() != Some(value);
        slot.value = Some(VariableValue {
            value: value.to_string(),
            timestamp,
            source,
        });
        self.version += 1;
        self.now = self.now.max(timestamp);

        let mut delivered = 0;
        if changed {
            let note = Notification {
                slot: key.clone(),
                old: previous.clone(),
                new: value.to_string(),
                timestamp,
            };
            // A dropped receiver cancels its subscription.
            self.watchers.retain(|w| {
                if &w.slot != key {
                    return true;
                }
                let alive = w.tx.send(note.clone()).is_ok();
                delivered += usize::from(alive);
                alive
            });
        }
        Ok(CommitOutcome {
            changed,
            previous,
            delivered,
        })
    }

    pub fn get_value(&self, key: &SlotKey) -> Result<Option<&VariableValue>> {
        self.slot(key).map(|s| s.value.as_ref())
    }

    /// Latest value unless it is older than the variable's staleness window
    /// at `now`.
    pub fn fresh_value(&self, key: &SlotKey, now: u64) -> Result<Option<&VariableValue>> {
        let slot = self.slot(key)?;
        Ok(slot.value.as_ref().filter(|v| match slot.spec.stale_after_ms {
            Some(window) => now.saturating_sub(v.timestamp) <= window,
            None => true,
        }))
    }

    /// Subscribes to value changes of one slot.
    pub fn watch(&mut self, key: &SlotKey) -> Result<Subscription> {
        let (tx, rx) = channel();
        let id = self.watch_with(key, tx)?;
        Ok(Subscription { id, rx })
    }

    /// Like [`watch`](Self::watch) but delivers into a caller-owned channel,
    /// so one receiver can observe several slots in commit order.
    pub fn watch_with(&mut self, key: &SlotKey, tx: Sender<Notification>) -> Result<WatchId> {
        self.slot(key)?;
        let id = WatchId(self.next_watch);
        self.next_watch += 1;
        self.watchers.push(Watcher {
            id,
            slot: key.clone(),
            tx,
        });
        Ok(id)
    }

    /// Returns whether the subscription was still active.
    pub fn unwatch(&mut self, id: WatchId) -> bool {
        let before = self.watchers.len();
        self.watchers.retain(|w| w.id != id);
        before != self.watchers.len()
    }

    pub fn publish_posterior(&mut self, key: &SlotKey, dist: Distribution) {
        self.posteriors.insert(key.clone(), dist);
        self.version += 1;
    }

    pub fn posterior(&self, key: &SlotKey) -> Option<&Distribution> {
        self.posteriors.get(key)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Advances the store clock; the clock never moves backwards.
    pub fn advance_clock(&mut self, t: u64) {
        self.now = self.now.max(t);
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        let entries = self
            .models
            .iter()
            .flat_map(|(chain, vars)| {
                vars.iter().filter_map(move |(name, slot)| {
                    slot.value
                        .as_ref()
                        .map(|v| (SlotKey::new(chain.clone(), name.clone()), v.clone()))
                })
            })
            .collect();
        ModelSnapshot {
            taken_at: self.now,
            version: self.version,
            entries,
            posteriors: self.posteriors.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(ids: &[&str]) -> ModelChain {
        ModelChain::parse_ids(ids.iter().copied()).unwrap()
    }

    fn store() -> ModelStore {
        let mut s = ModelStore::default();
        s.register_agent("child").unwrap();
        s.register_agent("robot").unwrap();
        s.declare_variable(
            &chain(&["child"]),
            VariableSpec::perceived("child_gaze_target", ["hand", "object", "elsewhere"]),
        )
        .unwrap();
        s.declare_variable(
            &chain(&["child"]),
            VariableSpec::abstract_var("understood_pointing", ["yes", "no"]),
        )
        .unwrap();
        s
    }

    fn gaze() -> SlotKey {
        "[child].child_gaze_target".parse().unwrap()
    }

    #[test]
    fn register_is_idempotent_and_validated() {
        let mut s = ModelStore::default();
        s.register_agent("child").unwrap();
        s.register_agent("child").unwrap();
        assert_eq!(s.agents().count(), 1);
        assert_eq!(s.register_agent(""), Err(StoreError::MalformedAgentId(String::new())));
        assert!(s.register_agent("a b").is_err());
        // case-sensitive
        s.register_agent("Child").unwrap();
        assert_eq!(s.agents().count(), 2);
    }

    #[test]
    fn order_and_resolution() {
        let mut s = store();
        assert_eq!(s.order(&ModelChain::ego()).unwrap(), 0);
        assert_eq!(s.order(&chain(&["child"])).unwrap(), 1);
        assert_eq!(s.order(&chain(&["child", "robot"])).unwrap(), 2);
        assert_eq!(
            s.order(&chain(&["teacher"])),
            Err(StoreError::UnknownAgent("teacher".into()))
        );

        assert_eq!(s.resolve_model(&chain(&["child"])).unwrap().order, 1);
        assert_eq!(s.resolve_model(&ModelChain::ego()).unwrap().order, 0);
        assert!(matches!(
            s.resolve_model(&chain(&["child", "robot", "child"])),
            Err(StoreError::OrderExceeded { order: 3, max: 2, .. })
        ));
    }

    #[test]
    fn chain_text_form() {
        let c: ModelChain = "[child,robot]".parse().unwrap();
        assert_eq!(c.to_string(), "[child,robot]");
        assert_eq!("[]".parse::<ModelChain>().unwrap(), ModelChain::ego());
        let k: SlotKey = "[].robot_gesture".parse().unwrap();
        assert!(k.chain.is_ego());
        assert!("child.x".parse::<SlotKey>().is_err());
        assert!("[child]x".parse::<SlotKey>().is_err());
    }

    #[test]
    fn redeclaration() {
        let mut s = store();
        s.declare_variable(
            &chain(&["child"]),
            VariableSpec::perceived("child_gaze_target", ["hand", "object", "elsewhere"])
                .with_description("same domain, new text"),
        )
        .unwrap();
        assert_eq!(
            s.declare_variable(
                &chain(&["child"]),
                VariableSpec::perceived("child_gaze_target", ["yes", "no"]),
            ),
            Err(StoreError::ConflictingSpec(gaze()))
        );
        assert!(matches!(
            s.declare_variable(&chain(&["child"]), VariableSpec::perceived("x", ["a", "a"])),
            Err(StoreError::InvalidSpec { .. })
        ));
        assert!(matches!(
            s.declare_variable(&chain(&["child"]), VariableSpec::perceived("x", ["a"])),
            Err(StoreError::InvalidSpec { .. })
        ));
    }

    #[test]
    fn commit_notifies_only_on_change() {
        let mut s = store();
        let sub = s.watch(&gaze()).unwrap();
        let out = s.commit_value(&gaze(), "hand", 1200, Source::Perception).unwrap();
        assert!(out.changed);
        assert_eq!(out.delivered, 1);
        let out = s.commit_value(&gaze(), "hand", 1300, Source::Perception).unwrap();
        assert!(!out.changed);
        assert_eq!(out.delivered, 0);
        assert_eq!(s.get_value(&gaze()).unwrap().unwrap().timestamp, 1300);

        s.commit_value(&gaze(), "object", 1400, Source::Harness).unwrap();
        let notes = sub.drain();
        assert_eq!(notes.len(), 2);
        assert_eq!(notes[1].old.as_deref(), Some("hand"));
        assert_eq!(notes[1].new, "object");
        assert_eq!(notes[1].timestamp, 1400);
    }

    #[test]
    fn commit_guards() {
        let mut s = store();
        let u: SlotKey = "[child].understood_pointing".parse().unwrap();
        assert!(matches!(
            s.commit_value(&u, "yes", 0, Source::Perception),
            Err(StoreError::KindSourceMismatch { .. })
        ));
        assert!(matches!(
            s.commit_value(&gaze(), "yes", 0, Source::Perception),
            Err(StoreError::ValueOutOfDomain { .. })
        ));
        assert!(matches!(
            s.commit_value(&gaze(), "hand", 0, Source::Inference),
            Err(StoreError::KindSourceMismatch { .. })
        ));
        s.commit_value(&gaze(), "hand", 10, Source::Perception).unwrap();
        assert_eq!(
            s.commit_value(&gaze(), "object", 9, Source::Perception),
            Err(StoreError::TimestampRegression {
                slot: gaze(),
                last: 10,
                attempted: 9
            })
        );
        assert_eq!(s.get_value(&gaze()).unwrap().unwrap().value, "hand");
    }

    #[test]
    fn get_value_cases() {
        let mut s = store();
        assert_eq!(s.get_value(&gaze()).unwrap(), None);
        let missing: SlotKey = "[child].nope".parse().unwrap();
        assert_eq!(s.get_value(&missing), Err(StoreError::UnknownVariable(missing.clone())));
        assert!(s.watch(&missing).is_err());
    }

    #[test]
    fn two_watchers_and_unsubscribe() {
        let mut s = store();
        let a = s.watch(&gaze()).unwrap();
        let b = s.watch(&gaze()).unwrap();
        s.commit_value(&gaze(), "hand", 1, Source::Perception).unwrap();
        assert_eq!(a.drain().len(), 1);
        assert_eq!(b.drain().len(), 1);
        assert!(s.unwatch(a.id()));
        assert!(!s.unwatch(a.id()));
        s.commit_value(&gaze(), "object", 2, Source::Perception).unwrap();
        assert!(a.drain().is_empty());
        assert_eq!(b.drain().len(), 1);
        drop(b);
        let out = s.commit_value(&gaze(), "hand", 3, Source::Perception).unwrap();
        assert_eq!(out.delivered, 0);
    }

    #[test]
    fn staleness_window() {
        let mut s = ModelStore::default();
        let ego = ModelChain::ego();
        let key = s
            .declare_variable(&ego, VariableSpec::perceived("g", ["a", "b"]).with_staleness(100))
            .unwrap();
        s.commit_value(&key, "a", 50, Source::Harness).unwrap();
        assert!(s.fresh_value(&key, 150).unwrap().is_some());
        assert!(s.fresh_value(&key, 151).unwrap().is_none());
        assert!(s.get_value(&key).unwrap().is_some());
    }

    #[test]
    fn snapshots() {
        let mut s = store();
        assert!(s.snapshot().entries.is_empty());
        let ego = ModelChain::ego();
        let g = s
            .declare_variable(&ego, VariableSpec::perceived("robot_gesture", ["pointing", "idle"]))
            .unwrap();
        s.commit_value(&gaze(), "hand", 1, Source::Perception).unwrap();
        s.commit_value(&g, "pointing", 2, Source::Perception).unwrap();
        s.commit_value(&gaze(), "object", 3, Source::Perception).unwrap();
        let snap = s.snapshot();
        assert_eq!(snap.entries.len(), 2);
        assert_eq!(snap.value(&gaze()), Some("object"));
        assert_eq!(snap.taken_at, 3);
        assert_eq!(s.snapshot(), snap);
    }
}
