//! Seeded random networks and scenarios for property and acceptance tests.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{Input, Scenario, TimelineEntry};
use crate::decision::{ActionTemplate, AutonomyMode, DecisionRule, HumanVerdict, RuleScope};
use crate::engine::Declarations;
use crate::inference::{Cpt, CptRow};
use crate::perception::{Scalar, SensorBinding, Transform};
use crate::store::{ModelChain, SlotKey, VariableKind, VariableSpec};

/// Smallest probability a generated row entry can take, so that every
/// evidence combination stays possible.
pub const MIN_ENTRY: f64 = 0.02;

/// Every parent-label combination, first parent most significant.
pub fn parent_rows(domains: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut rows = vec![Vec::new()];
    for d in domains {
        rows = rows
            .into_iter()
            .flat_map(|prefix: Vec<String>| {
                d.iter().map(move |l| {
                    let mut r = prefix.clone();
                    r.push(l.clone());
                    r
                })
            })
            .collect();
    }
    rows
}

/// A strictly positive probability vector summing to one.
pub fn random_row(rng: &mut impl Rng, card: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..card).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let spare = 1.0 - MIN_ENTRY * card as f64;
    let mut row: Vec<f64> = raw.iter().map(|x| MIN_ENTRY + spare * x / total).collect();
    // Put rounding error on the last entry.
    let head: f64 = row[..card - 1].iter().sum();
    row[card - 1] = 1.0 - head;
    row
}

#[derive(Debug, Clone)]
pub struct RandomNetwork {
    pub agents: Vec<String>,
    pub variables: Vec<(ModelChain, VariableSpec)>,
    pub cpts: Vec<Cpt>,
}

impl RandomNetwork {
    pub fn slots(&self) -> Vec<SlotKey> {
        self.variables
            .iter()
            .map(|(c, v)| SlotKey::new(c.clone(), v.name.clone()))
            .collect()
    }

    pub fn domains(&self) -> BTreeMap<SlotKey, Vec<String>> {
        self.variables
            .iter()
            .map(|(c, v)| (SlotKey::new(c.clone(), v.name.clone()), v.domain.clone()))
            .collect()
    }
}

/// A random DAG of `1..=max_nodes` nodes with `2..=max_labels` labels
/// each and at most three parents per node. Variables are spread over the
/// ego, first- and second-order models of two agents.
pub fn random_network(rng: &mut impl Rng, max_nodes: usize, max_labels: usize) -> RandomNetwork {
    let n = rng.random_range(1..=max_nodes.max(1));
    let chains: [ModelChain; 4] = ["[]", "[a]", "[b]", "[a,b]"].map(|c| c.parse().expect("valid"));
    let mut variables = Vec::with_capacity(n);
    for i in 0..n {
        let card = rng.random_range(2..=max_labels.max(2));
        let kind = if rng.random_bool(0.5) {
            VariableKind::Perceived
        } else {
            VariableKind::Abstract
        };
        let domain: Vec<String> = (0..card).map(|k| format!("l{k}")).collect();
        let chain = chains[rng.random_range(0..chains.len())].clone();
        variables.push((chain, VariableSpec::new(format!("v{i}"), kind, domain)));
    }
    let slot = |i: usize| SlotKey::new(variables[i].0.clone(), variables[i].1.name.clone());
    let mut cpts = Vec::with_capacity(n);
    for i in 0..n {
        let mut earlier: Vec<usize> = (0..i).collect();
        earlier.shuffle(rng);
        let k = rng.random_range(0..=earlier.len().min(3));
        let parents: Vec<usize> = earlier[..k].to_vec();
        let pdoms: Vec<Vec<String>> = parents.iter().map(|&p| variables[p].1.domain.clone()).collect();
        let card = variables[i].1.domain.len();
        let rows = parent_rows(&pdoms)
            .into_iter()
            .map(|given| CptRow {
                given,
                p: random_row(rng, card),
            })
            .collect();
        cpts.push(Cpt {
            node: slot(i),
            parents: parents.into_iter().map(slot).collect(),
            rows,
        });
    }
    // Declaration order need not be topological.
    cpts.shuffle(rng);
    RandomNetwork {
        agents: vec!["a".into(), "b".into()],
        variables,
        cpts,
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub mode: AutonomyMode,
    /// Include mode-change entries in the timeline.
    pub mode_changes: bool,
    pub entries: usize,
    pub max_nodes: usize,
    pub max_labels: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            mode: AutonomyMode::Mixed,
            mode_changes: true,
            entries: 40,
            max_nodes: 6,
            max_labels: 3,
        }
    }
}

const VERBS: [&str; 4] = ["exaggerate_gesture", "repeat_word", "switch_activity", "praise"];

/// A random but valid scenario: a random network, one categorical sensor
/// per perceived variable, a few threshold rules and a timeline mixing
/// sensor events (some unbound or malformed), operator inputs and, when
/// enabled, mode changes.
pub fn random_scenario(seed: u64, cfg: &GenConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_network(&mut rng, cfg.max_nodes, cfg.max_labels);
    let slots = net.slots();
    let perceived: Vec<usize> = (0..slots.len())
        .filter(|&i| net.variables[i].1.kind == VariableKind::Perceived)
        .collect();

    let bindings: Vec<SensorBinding> = perceived
        .iter()
        .map(|&i| SensorBinding {
            sensor: format!("s{i}"),
            target: slots[i].clone(),
            transform: Transform::Categorical { field: "value".into() },
        })
        .collect();

    let n_rules = rng.random_range(1..=3);
    let rules: Vec<DecisionRule> = (0..n_rules)
        .map(|r| {
            let i = rng.random_range(0..slots.len());
            let dom = &net.variables[i].1.domain;
            let label = &dom[rng.random_range(0..dom.len())];
            let when = if rng.random_bool(0.7) {
                let cmp = if rng.random_bool(0.5) { "<" } else { ">" };
                let c = (rng.random_range(0.05..0.95_f64) * 100.0).round() / 100.0;
                format!("P({} = {label}) {cmp} {c}", slots[i])
            } else {
                format!("value({}) = {label}", slots[i])
            };
            DecisionRule {
                name: format!("r{r}"),
                scope: RuleScope::General,
                when: when.parse().expect("generated condition"),
                action: ActionTemplate::new(VERBS[rng.random_range(0..VERBS.len())]),
                cooldown_ms: [0, 500, 2000][rng.random_range(0..3)],
            }
        })
        .collect();

    let mut t = 0u64;
    let mut timeline = Vec::with_capacity(cfg.entries);
    for _ in 0..cfg.entries {
        t += [0, 10, 100, 1000, 20_000][rng.random_range(0..5)];
        let roll = rng.random_range(0..100);
        let input = if roll < 65 && !perceived.is_empty() {
            let i = perceived[rng.random_range(0..perceived.len())];
            let dom = &net.variables[i].1.domain;
            let value = if rng.random_bool(0.05) {
                "bogus".to_string()
            } else {
                dom[rng.random_range(0..dom.len())].clone()
            };
            Input::Event {
                sensor: format!("s{i}"),
                payload: [("value".to_string(), Scalar::Token(value))].into(),
            }
        } else if roll < 70 {
            Input::Event {
                sensor: "unbound".into(),
                payload: BTreeMap::new(),
            }
        } else if roll < 80 && cfg.mode_changes {
            let mode = [AutonomyMode::Wizard, AutonomyMode::Mixed, AutonomyMode::Autonomous][rng.random_range(0..3)];
            Input::SetMode { mode }
        } else if roll < 88 {
            Input::Wizard {
                action: ActionTemplate::new(VERBS[rng.random_range(0..VERBS.len())]),
            }
        } else {
            let verdict = if rng.random_bool(0.5) {
                HumanVerdict::Approve
            } else {
                HumanVerdict::Reject
            };
            Input::Verdict {
                proposal: format!("p{}", rng.random_range(1..=8)),
                verdict,
            }
        };
        timeline.push(TimelineEntry { t, input });
    }

    Scenario {
        name: format!("random-{seed}"),
        declarations: Declarations {
            mode: cfg.mode,
            agents: net.agents.clone(),
            variables: net.variables.clone(),
            nodes: net.cpts.clone(),
            bindings,
            rules,
            ..Declarations::default()
        },
        timeline,
        expectations: vec![],
    }
}
