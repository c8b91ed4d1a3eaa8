//! Scenario scripts: declarations, a timed input stream and expectations.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::doc::{parse_document, write_document, DocError, ExpectationKind, Located, Record};
use crate::decision::{ActionTemplate, AutonomyMode, DecisionRule, HumanVerdict};
use crate::engine::{BuildError, Declarations, Engine, Entity};
use crate::inference::Cpt;
use crate::perception::{RawEvent, SensorBinding, Transform};
use crate::store::{ModelChain, SlotKey, VariableSpec};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: {source}")]
    Parse { file: String, source: DocError },
    #[error("{file}, line {line}: {entity}: {message}")]
    Validation {
        file: String,
        line: usize,
        entity: String,
        message: String,
    },
}

impl LoadError {
    fn invalid(file: &str, line: usize, entity: impl Into<String>, message: impl ToString) -> Self {
        LoadError::Validation {
            file: file.to_string(),
            line,
            entity: entity.into(),
            message: message.to_string(),
        }
    }
}

/// One timed input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "snake_case")]
pub enum Input {
    Event {
        sensor: String,
        payload: std::collections::BTreeMap<String, crate::perception::Scalar>,
    },
    SetMode {
        mode: AutonomyMode,
    },
    Wizard {
        action: ActionTemplate,
    },
    Verdict {
        proposal: String,
        verdict: HumanVerdict,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub t: u64,
    pub input: Input,
}

impl TimelineEntry {
    pub fn raw_event(&self) -> Option<RawEvent> {
        match &self.input {
            Input::Event { sensor, payload } => Some(RawEvent {
                timestamp: self.t,
                sensor: sensor.clone(),
                payload: payload.clone(),
            }),
            _ => None,
        }
    }
}

/// Subject of an expectation: a slot and label, or an action verb.
#[derive(Debug, Clone, PartialEq)]
pub struct Expectation {
    pub at: u64,
    pub kind: ExpectationKind,
    pub subject: String,
    pub label: Option<String>,
    pub bound: Option<f64>,
}

impl Expectation {
    pub fn slot(&self) -> Option<SlotKey> {
        self.subject.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub declarations: Declarations,
    pub timeline: Vec<TimelineEntry>,
    pub expectations: Vec<Expectation>,
}

impl Scenario {
    /// Builds a fresh engine from the declarations.
    pub fn engine(&self, seed: u64) -> Result<Engine, BuildError> {
        Engine::new(&self.declarations, seed)
    }

    /// Serializes the scenario as a single self-contained document.
    pub fn to_document(&self) -> String {
        let d = &self.declarations;
        let mut recs = vec![
            Record::Scenario {
                name: self.name.clone(),
            },
            Record::Config {
                max_order: Some(d.max_order),
                mode: Some(d.mode),
                expiry_ms: Some(d.expiry_ms),
                inference: Some(d.inference),
            },
        ];
        recs.extend(d.agents.iter().map(|a| Record::Agent { id: a.clone() }));
        recs.extend(d.variables.iter().map(|(chain, s)| Record::Variable {
            model: chain.to_string(),
            name: s.name.clone(),
            kind: s.kind,
            domain: s.domain.clone(),
            description: s.description.clone(),
            stale_after_ms: s.stale_after_ms,
        }));
        recs.extend(d.nodes.iter().map(|c| Record::Node {
            node: c.node.clone(),
            parents: c.parents.clone(),
            rows: c.rows.clone(),
        }));
        recs.extend(d.bindings.iter().map(|b| {
            let (field, bins, gaze) = match &b.transform {
                Transform::Categorical { field } => (Some(field.clone()), None, None),
                Transform::Bins { field, bins } => (Some(field.clone()), Some(bins.clone()), None),
                Transform::Gaze(g) => (None, None, Some(g.clone())),
            };
            Record::Binding {
                sensor: b.sensor.clone(),
                target: b.target.clone(),
                field,
                bins,
                gaze,
            }
        }));
        recs.extend(d.rules.iter().map(|r| Record::Rule {
            name: r.name.clone(),
            scope: r.scope,
            when: r.when.clone(),
            action: r.action.clone(),
            cooldown_ms: r.cooldown_ms,
        }));
        recs.extend(self.timeline.iter().map(|e| match &e.input {
            Input::Event { sensor, payload } => Record::Event {
                t: e.t,
                sensor: sensor.clone(),
                payload: payload.clone(),
            },
            Input::SetMode { mode } => Record::SetMode { t: e.t, mode: *mode },
            Input::Wizard { action } => Record::Wizard {
                t: e.t,
                action: action.clone(),
            },
            Input::Verdict { proposal, verdict } => Record::Verdict {
                t: e.t,
                proposal: proposal.clone(),
                verdict: *verdict,
            },
        }));
        recs.extend(self.expectations.iter().map(|x| Record::Expect {
            t: x.at,
            check: x.kind,
            subject: x.subject.clone(),
            label: x.label.clone(),
            bound: x.bound,
        }));
        write_document(&recs)
    }
}

/// Where each declaration came from, for error reporting.
#[derive(Default)]
struct Origins {
    agents: Vec<(String, usize)>,
    variables: Vec<(String, usize)>,
    nodes: Vec<(String, usize)>,
    bindings: Vec<(String, usize)>,
    rules: Vec<(String, usize)>,
}

impl Origins {
    fn locate(&self, e: &Entity) -> (&str, usize) {
        let (list, i) = match *e {
            Entity::Agent(i) => (&self.agents, i),
            Entity::Variable(i) => (&self.variables, i),
            Entity::Node(i) => (&self.nodes, i),
            Entity::Binding(i) => (&self.bindings, i),
            Entity::Rule(i) => (&self.rules, i),
        };
        list.get(i).map_or(("", 0), |(f, l)| (f.as_str(), *l))
    }
}

fn entity_name(d: &Declarations, e: &Entity) -> String {
    match *e {
        Entity::Agent(i) => format!("agent {:?}", d.agents[i]),
        Entity::Variable(i) => format!("variable {}.{}", d.variables[i].0, d.variables[i].1.name),
        Entity::Node(i) => format!("node {}", d.nodes[i].node),
        Entity::Binding(i) => format!("binding {} -> {}", d.bindings[i].sensor, d.bindings[i].target),
        Entity::Rule(i) => format!("rule {:?}", d.rules[i].name),
    }
}

struct Loader {
    name: Option<String>,
    decls: Declarations,
    origins: Origins,
    timeline: Vec<(String, usize, TimelineEntry)>,
    expectations: Vec<(String, usize, Expectation)>,
    seen_files: BTreeSet<PathBuf>,
}

impl Loader {
    fn read(&mut self, path: &Path) -> Result<(), LoadError> {
        let canonical = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        let file = path.display().to_string();
        if !self.seen_files.insert(canonical) {
            return Err(LoadError::invalid(&file, 0, "include", "circular or repeated include"));
        }
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf);
        self.absorb(&text, &file, base.as_deref())
    }

    fn absorb(&mut self, text: &str, file: &str, base: Option<&Path>) -> Result<(), LoadError> {
        let records = parse_document(text).map_err(|source| LoadError::Parse {
            file: file.to_string(),
            source,
        })?;
        for Located { line, value } in records {
            self.record(value, file, line, base)?;
        }
        Ok(())
    }

    fn record(&mut self, r: Record, file: &str, line: usize, base: Option<&Path>) -> Result<(), LoadError> {
        let origin = (file.to_string(), line);
        let d = &mut self.decls;
        match r {
            Record::Scenario { name } => {
                if self.name.replace(name).is_some() {
                    return Err(LoadError::invalid(file, line, "scenario", "scenario name given twice"));
                }
            }
            Record::Config {
                max_order,
                mode,
                expiry_ms,
                inference,
            } => {
                if let Some(m) = max_order {
                    d.max_order = m;
                }
                if let Some(m) = mode {
                    d.mode = m;
                }
                if let Some(e) = expiry_ms {
                    d.expiry_ms = e;
                }
                if let Some(i) = inference {
                    if matches!(i, crate::engine::InferenceMethod::Sampling { samples: 0 }) {
                        return Err(LoadError::invalid(
                            file,
                            line,
                            "config",
                            "sample count must be positive",
                        ));
                    }
                    d.inference = i;
                }
            }
            Record::Include { path } => {
                let p = match base {
                    Some(b) => b.join(&path),
                    None => PathBuf::from(&path),
                };
                self.read(&p)?;
            }
            Record::Agent { id } => {
                d.agents.push(id);
                self.origins.agents.push(origin);
            }
            Record::Variable {
                model,
                name,
                kind,
                domain,
                description,
                stale_after_ms,
            } => {
                let chain: ModelChain = model
                    .parse()
                    .map_err(|e| LoadError::invalid(file, line, format!("variable {name}"), e))?;
                d.variables.push((
                    chain,
                    VariableSpec {
                        name,
                        kind,
                        domain,
                        description,
                        stale_after_ms,
                    },
                ));
                self.origins.variables.push(origin);
            }
            Record::Node { node, parents, rows } => {
                d.nodes.push(Cpt { node, parents, rows });
                self.origins.nodes.push(origin);
            }
            Record::Binding {
                sensor,
                target,
                field,
                bins,
                gaze,
            } => {
                let entity = format!("binding {sensor} -> {target}");
                let transform = match (field, bins, gaze) {
                    (None, None, Some(g)) => Transform::Gaze(g),
                    (Some(field), Some(bins), None) => Transform::Bins { field, bins },
                    (Some(field), None, None) => Transform::Categorical { field },
                    _ => {
                        return Err(LoadError::invalid(
                            file,
                            line,
                            entity,
                            "give either `field`, `field` with `bins`, or `gaze`",
                        ))
                    }
                };
                if sensor.is_empty() {
                    return Err(LoadError::invalid(file, line, entity, "empty sensor token"));
                }
                d.bindings.push(SensorBinding {
                    sensor,
                    target,
                    transform,
                });
                self.origins.bindings.push(origin);
            }
            Record::Rule {
                name,
                scope,
                when,
                action,
                cooldown_ms,
            } => {
                d.rules.push(DecisionRule {
                    name,
                    scope,
                    when,
                    action,
                    cooldown_ms,
                });
                self.origins.rules.push(origin);
            }
            Record::Event { t, sensor, payload } => {
                if sensor.is_empty() {
                    return Err(LoadError::invalid(file, line, "event", "empty sensor token"));
                }
                self.push_entry(file, line, t, Input::Event { sensor, payload });
            }
            Record::SetMode { t, mode } => self.push_entry(file, line, t, Input::SetMode { mode }),
            Record::Wizard { t, action } => {
                if action.verb.is_empty() {
                    return Err(LoadError::invalid(file, line, "wizard", "empty action verb"));
                }
                self.push_entry(file, line, t, Input::Wizard { action })
            }
            Record::Verdict { t, proposal, verdict } => {
                self.push_entry(file, line, t, Input::Verdict { proposal, verdict })
            }
            Record::Expect {
                t,
                check,
                subject,
                label,
                bound,
            } => {
                let x = Expectation {
                    at: t,
                    kind: check,
                    subject,
                    label,
                    bound,
                };
                self.expectations.push((file.to_string(), line, x));
            }
        }
        Ok(())
    }

    fn push_entry(&mut self, file: &str, line: usize, t: u64, input: Input) {
        self.timeline.push((file.to_string(), line, TimelineEntry { t, input }));
    }

    fn finish(self) -> Result<Scenario, LoadError> {
        let Loader {
            name,
            decls,
            origins,
            timeline,
            expectations,
            ..
        } = self;

        let engine = Engine::new(&decls, 0).map_err(|e| {
            let (file, line) = origins.locate(&e.entity);
            LoadError::invalid(file, line, entity_name(&decls, &e.entity), e.error)
        })?;

        let mut last = 0;
        for (file, line, e) in &timeline {
            if e.t < last {
                return Err(LoadError::invalid(
                    file,
                    *line,
                    "timeline",
                    format!("timestamp {} precedes previous entry at {last}", e.t),
                ));
            }
            last = e.t;
        }

        for (file, line, x) in &expectations {
            validate_expectation(&engine, x).map_err(|m| LoadError::invalid(file, *line, "expect", m))?;
        }

        Ok(Scenario {
            name: name.unwrap_or_else(|| "unnamed".into()),
            declarations: decls,
            timeline: timeline.into_iter().map(|(_, _, e)| e).collect(),
            expectations: expectations.into_iter().map(|(_, _, x)| x).collect(),
        })
    }
}

fn validate_expectation(engine: &Engine, x: &Expectation) -> Result<(), String> {
    match x.kind {
        ExpectationKind::ValueEquals | ExpectationKind::PosteriorBelow | ExpectationKind::PosteriorAbove => {
            let slot: SlotKey = x.subject.parse().map_err(|e| format!("subject {:?}: {e}", x.subject))?;
            let spec = engine
                .store()
                .spec(&slot)
                .map_err(|_| format!("undeclared variable {slot}"))?;
            let label = x.label.as_deref().ok_or("missing label")?;
            if spec.label_index(label).is_none() {
                return Err(format!("label {label:?} not in the domain of {slot}"));
            }
            if x.kind != ExpectationKind::ValueEquals {
                let b = x.bound.ok_or("missing probability bound")?;
                if !(0.0..=1.0).contains(&b) {
                    return Err(format!("probability bound {b} outside [0, 1]"));
                }
            }
        }
        ExpectationKind::ActionExecuted | ExpectationKind::ProposalCreated => {
            if x.subject.is_empty() {
                return Err("empty action verb".into());
            }
        }
    }
    Ok(())
}

fn loader() -> Loader {
    Loader {
        name: None,
        decls: Declarations::default(),
        origins: Origins::default(),
        timeline: Vec::new(),
        expectations: Vec::new(),
        seen_files: BTreeSet::new(),
    }
}

/// Loads and validates a scenario file, following `include` records
/// relative to the including file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, LoadError> {
    let mut l = loader();
    l.read(path.as_ref())?;
    l.finish()
}

/// Parses scenario text; includes resolve against `base_dir` when given.
pub fn parse_scenario(text: &str, base_dir: Option<&Path>) -> Result<Scenario, LoadError> {
    let mut l = loader();
    l.absorb(text, "<input>", base_dir)?;
    l.finish()
}
