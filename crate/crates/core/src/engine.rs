//! The engine loop: perception, mutual models, inference and decisions
//! composed into one single-writer state machine.
//!
//! Every mutation goes through an `Engine` method on the owning thread and
//! appends [`EngineEvent`]s in processing order; harnesses and servers
//! drain those events to build traces or broadcasts.

use std::collections::BTreeSet;
use std::sync::mpsc::{channel, Receiver};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{
    ActionTemplate, AutonomyMode, DecisionError, DecisionPipeline, DecisionRecord, DecisionRule, DecisionSource,
    Disposition, HumanVerdict, Proposal, ProposalStatus, RuleSet, DEFAULT_PROPOSAL_EXPIRY_MS,
};
use crate::inference::{
    build_network, map_value, update_on_change, BayesNet, Cpt, Distribution, InferenceError, NodeUpdate,
    UpdateDiagnostic, UpdateReport,
};
use crate::perception::{Perception, PerceptionError, RawEvent, SensorBinding};
use crate::store::{
    ModelChain, ModelSnapshot, ModelStore, Notification, SlotKey, Source, StoreError, VariableKind, VariableSpec,
    DEFAULT_MAX_ORDER,
};

/// How abstract variables are recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum InferenceMethod {
    #[default]
    Exact,
    /// Likelihood weighting, reseeded per update from the run seed.
    Sampling { samples: usize },
}

/// Everything needed to instantiate an engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Declarations {
    pub max_order: usize,
    pub mode: AutonomyMode,
    pub expiry_ms: u64,
    #[serde(default)]
    pub inference: InferenceMethod,
    pub agents: Vec<String>,
    pub variables: Vec<(ModelChain, VariableSpec)>,
    pub nodes: Vec<Cpt>,
    pub bindings: Vec<SensorBinding>,
    pub rules: Vec<DecisionRule>,
}

impl Default for Declarations {
    fn default() -> Self {
        Self {
            max_order: DEFAULT_MAX_ORDER,
            mode: AutonomyMode::Wizard,
            expiry_ms: DEFAULT_PROPOSAL_EXPIRY_MS,
            inference: InferenceMethod::Exact,
            agents: Vec::new(),
            variables: Vec::new(),
            nodes: Vec::new(),
            bindings: Vec::new(),
            rules: Vec::new(),
        }
    }
}

/// The declaration that failed to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entity {
    Agent(usize),
    Variable(usize),
    Node(usize),
    Binding(usize),
    Rule(usize),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildErrorKind {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct BuildError {
    pub entity: Entity,
    pub error: BuildErrorKind,
}

/// Observable engine effects, in processing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineEvent {
    Commit {
        slot: SlotKey,
        value: String,
        source: Source,
        changed: bool,
    },
    Notification {
        slot: SlotKey,
        old: Option<String>,
        new: String,
    },
    Posterior {
        slot: SlotKey,
        distribution: Distribution,
        label: String,
    },
    Diagnostic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slot: Option<SlotKey>,
        message: String,
    },
    UnboundSensor {
        sensor: String,
    },
    ModeChanged {
        from: AutonomyMode,
        to: AutonomyMode,
    },
    ProposalCreated {
        proposal: Proposal,
    },
    ProposalResolved {
        id: String,
        status: ProposalStatus,
    },
    /// A decision-log entry, human or engine, executed or rejected.
    Decision {
        record: DecisionRecord,
    },
    ActionExecuted {
        action: ActionTemplate,
        source: DecisionSource,
        #[serde(default)]
        human_reviewed: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        proposal: Option<String>,
    },
    CommandRejected {
        command: String,
        error: String,
    },
}

/// The mutual-modelling engine.
pub struct Engine {
    store: ModelStore,
    perception: Perception,
    net: Option<BayesNet>,
    rules: RuleSet,
    pipeline: DecisionPipeline,
    inference: InferenceMethod,
    seed: u64,
    notes: Receiver<Notification>,
    events: Vec<(u64, EngineEvent)>,
    updates: u64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("store", &self.store)
            .field("mode", &self.pipeline.mode())
            .field("now", &self.store.now())
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(decls: &Declarations, seed: u64) -> Result<Self, BuildError> {
        let at = |entity| move |e: BuildErrorKind| BuildError { entity, error: e };
        let mut store = ModelStore::new(decls.max_order);
        for (i, a) in decls.agents.iter().enumerate() {
            store.register_agent(a).map_err(|e| at(Entity::Agent(i))(e.into()))?;
        }
        for (i, (chain, spec)) in decls.variables.iter().enumerate() {
            store
                .declare_variable(chain, spec.clone())
                .map_err(|e| at(Entity::Variable(i))(e.into()))?;
        }
        let net = if decls.nodes.is_empty() {
            None
        } else {
            Some(build_network(&decls.nodes, &store).map_err(|e| {
                let culprit = network_culprit(&decls.nodes, &e);
                at(Entity::Node(culprit))(e.into())
            })?)
        };
        let mut perception = Perception::new();
        for (i, b) in decls.bindings.iter().enumerate() {
            perception
                .bind(b.clone(), &store)
                .map_err(|e| at(Entity::Binding(i))(e.into()))?;
        }
        for (i, r) in decls.rules.iter().enumerate() {
            crate::decision::validate_rule(r, &store).map_err(|e| at(Entity::Rule(i))(e.into()))?;
        }
        let rules = RuleSet::new(decls.rules.clone(), &store).map_err(|e| {
            let culprit = match &e {
                DecisionError::InvalidRule { rule, .. } => {
                    decls.rules.iter().rposition(|r| &r.name == rule).unwrap_or(0)
                }
                _ => 0,
            };
            at(Entity::Rule(culprit))(e.into())
        })?;

        let (tx, notes) = channel();
        let slots: Vec<SlotKey> = store.declared().map(|(k, _)| k).collect();
        for slot in &slots {
            store.watch_with(slot, tx.clone()).expect("declared");
        }
        Ok(Self {
            store,
            perception,
            net,
            rules,
            pipeline: DecisionPipeline::new(decls.mode, decls.expiry_ms),
            inference: decls.inference,
            seed,
            notes,
            events: Vec::new(),
            updates: 0,
        })
    }

    pub fn store(&self) -> &ModelStore {
        &self.store
    }

    pub fn network(&self) -> Option<&BayesNet> {
        self.net.as_ref()
    }

    pub fn pipeline(&self) -> &DecisionPipeline {
        &self.pipeline
    }

    pub fn mode(&self) -> AutonomyMode {
        self.pipeline.mode()
    }

    pub fn now(&self) -> u64 {
        self.store.now()
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        self.store.snapshot()
    }

    pub fn unbound_sensor_events(&self) -> u64 {
        self.perception.unbound_count()
    }

    /// Events produced since the last drain, with their virtual time.
    pub fn drain_events(&mut self) -> Vec<(u64, EngineEvent)> {
        std::mem::take(&mut self.events)
    }

    fn emit(&mut self, t: u64, e: EngineEvent) {
        self.events.push((t, e));
    }

    fn tick(&mut self, t: u64) {
        self.store.advance_clock(t);
        self.expire(self.now());
    }

    fn expire(&mut self, now: u64) {
        for p in self.pipeline.expire_due(now) {
            self.emit(
                now,
                EngineEvent::ProposalResolved {
                    id: p.id,
                    status: ProposalStatus::Expired,
                },
            );
        }
    }

    /// Advances virtual time without input, expiring due proposals.
    pub fn advance_to(&mut self, t: u64) {
        self.tick(t);
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.pipeline.next_deadline()
    }

    fn drain_notifications(&mut self) -> BTreeSet<SlotKey> {
        let notes: Vec<Notification> = self.notes.try_iter().collect();
        let mut changed = BTreeSet::new();
        for n in notes {
            changed.insert(n.slot.clone());
            self.emit(
                n.timestamp,
                EngineEvent::Notification {
                    slot: n.slot,
                    old: n.old,
                    new: n.new,
                },
            );
        }
        changed
    }

    /// Runs one sensor event through perception, inference and the rules.
    pub fn ingest(&mut self, event: &RawEvent) {
        let t = event.timestamp;
        self.tick(t);
        let t = self.now();
        let event = RawEvent {
            timestamp: t,
            ..event.clone()
        };
        let before = self.perception.unbound_count();
        match self.perception.ingest_event(&event, &mut self.store) {
            Ok(commits) => {
                for c in commits {
                    self.emit(
                        t,
                        EngineEvent::Commit {
                            slot: c.slot,
                            value: c.value,
                            source: Source::Perception,
                            changed: c.changed,
                        },
                    );
                }
            }
            Err(e) => self.emit(
                t,
                EngineEvent::Diagnostic {
                    slot: None,
                    message: format!("sensor {}: {e}", event.sensor),
                },
            ),
        }
        if self.perception.unbound_count() != before {
            self.emit(
                t,
                EngineEvent::UnboundSensor {
                    sensor: event.sensor.clone(),
                },
            );
        }
        self.propagate(t);
    }

    /// Commits a perceived value directly, bypassing sensor bindings.
    pub fn commit_perceived(&mut self, slot: &SlotKey, value: &str, t: u64) -> Result<(), StoreError> {
        self.tick(t);
        let t = self.now();
        let out = self.store.commit_value(slot, value, t, Source::Harness)?;
        self.emit(
            t,
            EngineEvent::Commit {
                slot: slot.clone(),
                value: value.to_string(),
                source: Source::Harness,
                changed: out.changed,
            },
        );
        self.propagate(t);
        Ok(())
    }

    fn propagate(&mut self, t: u64) {
        let changed = self.drain_notifications();
        if let Some(net) = &self.net {
            let perceived: BTreeSet<SlotKey> = changed
                .into_iter()
                .filter(|k| net.kind(k) == Some(VariableKind::Perceived))
                .collect();
            let report = match self.inference {
                InferenceMethod::Exact => update_on_change(net, &mut self.store, &perceived, t),
                InferenceMethod::Sampling { samples } => {
                    self.updates += 1;
                    let seed = self.seed ^ self.updates.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    sampled_update(net, &mut self.store, &perceived, t, samples, seed)
                }
            };
            self.record_update(report, t);
            self.drain_notifications();
        }
        self.run_rules();
    }

    fn record_update(&mut self, report: UpdateReport, t: u64) {
        for NodeUpdate {
            node,
            posterior,
            label,
            changed,
        } in report.updates
        {
            self.emit(
                t,
                EngineEvent::Commit {
                    slot: node.clone(),
                    value: label.clone(),
                    source: Source::Inference,
                    changed,
                },
            );
            self.emit(
                t,
                EngineEvent::Posterior {
                    slot: node,
                    distribution: posterior,
                    label,
                },
            );
        }
        for UpdateDiagnostic { node, error } in report.diagnostics {
            self.emit(
                t,
                EngineEvent::Diagnostic {
                    slot: Some(node),
                    message: error.to_string(),
                },
            );
        }
    }

    fn run_rules(&mut self) {
        let snap = self.store.snapshot();
        for p in self.rules.evaluate(&snap) {
            let t = p.created_at;
            self.emit(t, EngineEvent::ProposalCreated { proposal: p.clone() });
            let d = self.pipeline.submit_proposal(p, &snap);
            self.emit_disposition(t, d);
        }
    }

    fn emit_disposition(&mut self, t: u64, d: Disposition) {
        self.emit(
            t,
            EngineEvent::ProposalResolved {
                id: d.proposal.id.clone(),
                status: d.proposal.status,
            },
        );
        if let Some(r) = d.record {
            self.emit_record(&r);
        }
    }

    fn emit_record(&mut self, r: &DecisionRecord) {
        self.emit(r.timestamp, EngineEvent::Decision { record: r.clone() });
        if r.verdict == crate::decision::Verdict::Executed {
            self.emit(
                r.timestamp,
                EngineEvent::ActionExecuted {
                    action: r.action.clone(),
                    source: r.source,
                    human_reviewed: r.human_reviewed,
                    proposal: r.proposal.clone(),
                },
            );
        }
    }

    pub fn set_mode(&mut self, mode: AutonomyMode, t: u64) {
        self.tick(t);
        let t = self.now();
        let (tr, expired) = self.pipeline.set_mode(mode, t);
        self.emit(
            t,
            EngineEvent::ModeChanged {
                from: tr.from,
                to: tr.to,
            },
        );
        for p in expired {
            self.emit(
                t,
                EngineEvent::ProposalResolved {
                    id: p.id,
                    status: ProposalStatus::Expired,
                },
            );
        }
    }

    pub fn wizard_decide(&mut self, action: &ActionTemplate, t: u64) -> Result<DecisionRecord, DecisionError> {
        self.tick(t);
        let t = self.now();
        let snap = self.store.snapshot();
        match self.pipeline.wizard_decide(action, t, &snap) {
            Ok(r) => {
                self.emit_record(&r);
                Ok(r)
            }
            Err(e) => {
                self.emit(
                    t,
                    EngineEvent::CommandRejected {
                        command: "wizard_decide".into(),
                        error: e.to_string(),
                    },
                );
                Err(e)
            }
        }
    }

    pub fn resolve_proposal(&mut self, id: &str, verdict: HumanVerdict, t: u64) -> Result<Disposition, DecisionError> {
        self.tick(t);
        let t = self.now();
        let snap = self.store.snapshot();
        match self.pipeline.resolve_proposal(id, verdict, t, &snap) {
            Ok(d) => {
                self.emit_disposition(t, d.clone());
                Ok(d)
            }
            Err(e) => {
                self.emit(
                    t,
                    EngineEvent::CommandRejected {
                        command: "resolve_proposal".into(),
                        error: e.to_string(),
                    },
                );
                Err(e)
            }
        }
    }

    /// Drives virtual time to each remaining proposal deadline so the
    /// operator queue ends empty.
    pub fn flush_deadlines(&mut self) {
        while let Some(d) = self.pipeline.next_deadline() {
            self.tick(d);
        }
    }
}

fn sampled_update(
    net: &BayesNet,
    store: &mut ModelStore,
    changed: &BTreeSet<SlotKey>,
    t: u64,
    samples: usize,
    seed: u64,
) -> UpdateReport {
    let mut report = UpdateReport::default();
    let evidence = net.evidence_from(store, t);
    for node in net.affected_by(changed) {
        match net.approx_posterior(&evidence, &node, samples, seed) {
            Ok(posterior) => {
                let label = map_value(&posterior).to_string();
                let changed = store
                    .commit_value(&node, &label, t, Source::Inference)
                    .map(|o| o.changed)
                    .unwrap_or(false);
                store.publish_posterior(&node, posterior.clone());
                report.updates.push(NodeUpdate {
                    node,
                    posterior,
                    label,
                    changed,
                });
            }
            Err(error) => report.diagnostics.push(UpdateDiagnostic { node, error }),
        }
    }
    report
}

fn network_culprit(nodes: &[Cpt], e: &InferenceError) -> usize {
    let key = match e {
        InferenceError::UnknownNode(k) | InferenceError::MissingCpt(k) | InferenceError::DuplicateCpt(k) => Some(k),
        InferenceError::RowNotNormalized { node, .. }
        | InferenceError::MalformedRow { node, .. }
        | InferenceError::MissingRow { node, .. } => Some(node),
        InferenceError::LabelOutOfDomain { node, .. } => {
            return nodes.iter().position(|c| c.parents.contains(node)).unwrap_or(0)
        }
        InferenceError::CycleDetected(names) => {
            return nodes
                .iter()
                .position(|c| names.contains(&c.node.to_string()))
                .unwrap_or(0)
        }
        _ => None,
    };
    let Some(key) = key else { return 0 };
    let referencing = |c: &Cpt| &c.node == key || c.parents.contains(key);
    match e {
        InferenceError::DuplicateCpt(_) => nodes.iter().rposition(|c| &c.node == key),
        InferenceError::UnknownNode(_) | InferenceError::MissingCpt(_) => nodes.iter().position(referencing),
        _ => nodes.iter().position(|c| &c.node == key),
    }
    .unwrap_or(0)
}
