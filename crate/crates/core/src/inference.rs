//! Discrete Bayesian network over chain-scoped variables.
//!
//! The network stores the expected causalities between perceived and
//! abstract variables. Exact posteriors come from enumeration over the
//! joint distribution of the query's and evidence's ancestors (other nodes
//! sum out to one); likelihood weighting is available for larger networks.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ModelStore, SlotKey, Source, VariableKind};

/// A network node is a declared variable in some model.
pub type NodeRef = SlotKey;

/// Observed labels for some nodes.
pub type EvidenceSet = BTreeMap<NodeRef, String>;

/// One joint observation, as used for parameter fitting.
pub type Assignment = BTreeMap<NodeRef, String>;

/// Row sums must match 1 within this tolerance.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("unknown node {0}")]
    UnknownNode(NodeRef),
    #[error("cycle detected through {0:?}")]
    CycleDetected(Vec<String>),
    #[error("node {0} has no conditional probability table")]
    MissingCpt(NodeRef),
    #[error("node {0} has more than one conditional probability table")]
    DuplicateCpt(NodeRef),
    #[error("row {row:?} of {node} is not normalized (sum {sum})")]
    RowNotNormalized { node: NodeRef, row: Vec<String>, sum: f64 },
    #[error("row {row:?} of {node} is malformed: {reason}")]
    MalformedRow {
        node: NodeRef,
        row: Vec<String>,
        reason: String,
    },
    #[error("table of {node} is missing the row for parents {row:?}")]
    MissingRow { node: NodeRef, row: Vec<String> },
    #[error("label {label:?} is not in the domain of {node}")]
    LabelOutOfDomain { node: NodeRef, label: String },
    #[error("evidence has zero probability under the network")]
    ZeroProbabilityEvidence,
    #[error("no sample was consistent with the evidence")]
    AllZeroWeights,
    #[error("sample count must be positive")]
    NoSamples,
    #[error("smoothing constant must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("record {record} does not assign {node}")]
    MissingField { record: usize, node: NodeRef },
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

/// Probability per label, in the variable's declared domain order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn new(labels: Vec<String>, probs: Vec<f64>) -> Self {
        debug_assert_eq!(labels.len(), probs.len());
        Self { labels, probs }
    }

    pub fn point_mass(labels: Vec<String>, at: usize) -> Self {
        let mut probs = vec![0.0; labels.len()];
        probs[at] = 1.0;
        Self { labels, probs }
    }

    pub fn prob(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.probs[i])
    }

    pub fn is_normalized(&self) -> bool {
        self.probs.iter().all(|p| *p >= 0.0) && (self.probs.iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOLERANCE
    }
}

/// Maximum-a-posteriori label; ties go to the earliest label in domain order.
pub fn map_value(d: &Distribution) -> &str {
    let mut best = 0;
    for (i, p) in d.probs.iter().enumerate() {
        if *p > d.probs[best] {
            best = i;
        }
    }
    &d.labels[best]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptRow {
    /// Parent labels, in the table's parent order.
    pub given: Vec<String>,
    /// Probabilities in the child's domain order.
    pub p: Vec<f64>,
}

/// Conditional probability table. Root nodes have no parents and a single
/// row with an empty `given`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpt {
    pub node: NodeRef,
    #[serde(default)]
    pub parents: Vec<NodeRef>,
    pub rows: Vec<CptRow>,
}

/// Lookup of variable domains by slot.
pub trait Domains {
    fn domain_of(&self, key: &NodeRef) -> Option<&[String]>;
}

impl Domains for ModelStore {
    fn domain_of(&self, key: &NodeRef) -> Option<&[String]> {
        self.spec(key).ok().map(|s| s.domain.as_slice())
    }
}

impl Domains for BTreeMap<NodeRef, Vec<String>> {
    fn domain_of(&self, key: &NodeRef) -> Option<&[String]> {
        self.get(key).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone)]
struct NetNode {
    key: NodeRef,
    kind: VariableKind,
    domain: Vec<String>,
    parents: Vec<usize>,
    /// Row-major: row index is mixed radix over parent values, first parent
    /// most significant.
    table: Vec<f64>,
}

impl NetNode {
    fn card(&self) -> usize {
        self.domain.len()
    }
}

/// Validated, topologically ordered network.
#[derive(Debug, Clone)]
pub struct BayesNet {
    nodes: Vec<NetNode>,
    index: BTreeMap<NodeRef, usize>,
    children: Vec<Vec<usize>>,
    cpts: Vec<Cpt>,
}

fn row_labels(row_index: usize, parents: &[usize], domains: &[Vec<String>]) -> Vec<String> {
    let mut rest = row_index;
    let mut out = vec![String::new(); parents.len()];
    for (slot, &p) in parents.iter().enumerate().rev() {
        let card = domains[p].len();
        out[slot] = domains[p][rest % card].clone();
        rest /= card;
    }
    out
}

/// Validates CPT declarations against the store and compiles them.
pub fn build_network(cpts: &[Cpt], store: &ModelStore) -> Result<BayesNet> {
    // declaration order, used for deterministic topological order
    let mut decl: BTreeMap<NodeRef, usize> = BTreeMap::new();
    for (i, cpt) in cpts.iter().enumerate() {
        if store.spec(&cpt.node).is_err() {
            return Err(InferenceError::UnknownNode(cpt.node.clone()));
        }
        if decl.insert(cpt.node.clone(), i).is_some() {
            return Err(InferenceError::DuplicateCpt(cpt.node.clone()));
        }
    }
    for cpt in cpts {
        for p in &cpt.parents {
            if store.spec(p).is_err() {
                return Err(InferenceError::UnknownNode(p.clone()));
            }
            if !decl.contains_key(p) {
                return Err(InferenceError::MissingCpt(p.clone()));
            }
        }
        let unique: BTreeSet<_> = cpt.parents.iter().collect();
        if unique.len() != cpt.parents.len() || unique.contains(&cpt.node) {
            return Err(InferenceError::MalformedRow {
                node: cpt.node.clone(),
                row: vec![],
                reason: "parents must be distinct and exclude the node itself".into(),
            });
        }
    }

    // Kahn's algorithm, picking ready nodes in declaration order.
    let n = cpts.len();
    let mut indegree: Vec<usize> = cpts.iter().map(|c| c.parents.len()).collect();
    let mut kids: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, cpt) in cpts.iter().enumerate() {
        for p in &cpt.parents {
            kids[decl[p]].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut topo = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        topo.push(i);
        for &k in &kids[i] {
            indegree[k] -= 1;
            if indegree[k] == 0 {
                ready.insert(k);
            }
        }
    }
    if topo.len() != n {
        let stuck = (0..n)
            .filter(|i| indegree[*i] > 0)
            .map(|i| cpts[i].node.to_string())
            .collect();
        return Err(InferenceError::CycleDetected(stuck));
    }

    let position: BTreeMap<NodeRef, usize> = topo
        .iter()
        .enumerate()
        .map(|(pos, &i)| (cpts[i].node.clone(), pos))
        .collect();
    let domains: Vec<Vec<String>> = topo
        .iter()
        .map(|&i| store.spec(&cpts[i].node).expect("checked").domain.clone())
        .collect();

    let mut nodes = Vec::with_capacity(n);
    for (pos, &i) in topo.iter().enumerate() {
        let cpt = &cpts[i];
        let spec = store.spec(&cpt.node).expect("checked");
        let parents: Vec<usize> = cpt.parents.iter().map(|p| position[p]).collect();
        let card = domains[pos].len();
        let n_rows: usize = parents.iter().map(|&p| domains[p].len()).product();
        let mut table = vec![f64::NAN; n_rows * card];
        let mut filled = vec![false; n_rows];

        for row in &cpt.rows {
            let malformed = |reason: &str| InferenceError::MalformedRow {
                node: cpt.node.clone(),
                row: row.given.clone(),
                reason: reason.to_string(),
            };
            if row.given.len() != parents.len() {
                return Err(malformed("wrong number of parent labels"));
            }
            if row.p.len() != card {
                return Err(malformed("probability count differs from domain size"));
            }
            let mut r = 0;
            for (label, &p) in row.given.iter().zip(&parents) {
                let v = domains[p]
                    .iter()
                    .position(|l| l == label)
                    .ok_or_else(|| InferenceError::LabelOutOfDomain {
                        node: nodes_key(cpts, &topo, p),
                        label: label.clone(),
                    })?;
                r = r * domains[p].len() + v;
            }
            if filled[r] {
                return Err(malformed("duplicate row"));
            }
            if row.p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(malformed("probabilities must be finite and non-negative"));
            }
            let sum: f64 = row.p.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(InferenceError::RowNotNormalized {
                    node: cpt.node.clone(),
                    row: row.given.clone(),
                    sum,
                });
            }
            filled[r] = true;
            table[r * card..(r + 1) * card].copy_from_slice(&row.p);
        }
        if let Some(r) = filled.iter().position(|f| !f) {
            return Err(InferenceError::MissingRow {
                node: cpt.node.clone(),
                row: row_labels(r, &parents, &domains),
            });
        }
        nodes.push(NetNode {
            key: cpt.node.clone(),
            kind: spec.kind,
            domain: domains[pos].clone(),
            parents,
            table,
        });
    }

    let mut children = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for &p in &node.parents {
            children[p].push(i);
        }
    }
    Ok(BayesNet {
        nodes,
        index: position,
        children,
        cpts: cpts.to_vec(),
    })
}

fn nodes_key(cpts: &[Cpt], topo: &[usize], pos: usize) -> NodeRef {
    cpts[topo[pos]].node.clone()
}

impl BayesNet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, key: &NodeRef) -> bool {
        self.index.contains_key(key)
    }

    /// Node keys in topological order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeRef> {
        self.nodes.iter().map(|n| &n.key)
    }

    pub fn kind(&self, key: &NodeRef) -> Option<VariableKind> {
        self.index.get(key).map(|&i| self.nodes[i].kind)
    }

    pub fn domain(&self, key: &NodeRef) -> Option<&[String]> {
        self.index.get(key).map(|&i| self.nodes[i].domain.as_slice())
    }

    pub fn parents(&self, key: &NodeRef) -> Option<Vec<&NodeRef>> {
        self.index
            .get(key)
            .map(|&i| self.nodes[i].parents.iter().map(|&p| &self.nodes[p].key).collect())
    }

    /// The tables as declared.
    pub fn cpts(&self) -> &[Cpt] {
        &self.cpts
    }

    fn idx(&self, key: &NodeRef) -> Result<usize> {
        self.index
            .get(key)
            .copied()
            .ok_or_else(|| InferenceError::UnknownNode(key.clone()))
    }

    fn row_start(&self, node: usize, assign: &[usize]) -> usize {
        let n = &self.nodes[node];
        let r = n.parents.iter().fold(0, |r, &p| r * self.nodes[p].card() + assign[p]);
        r * n.card()
    }

    fn prob(&self, node: usize, assign: &[usize]) -> f64 {
        self.nodes[node].table[self.row_start(node, assign) + assign[node]]
    }

    /// Parents, children and the children's other parents.
    pub fn markov_blanket(&self, key: &NodeRef) -> Result<BTreeSet<NodeRef>> {
        let i = self.idx(key)?;
        Ok(self.blanket(i).into_iter().map(|j| self.nodes[j].key.clone()).collect())
    }

    fn blanket(&self, i: usize) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = self.nodes[i].parents.iter().copied().collect();
        for &c in &self.children[i] {
            out.insert(c);
            out.extend(self.nodes[c].parents.iter().copied());
        }
        out.remove(&i);
        out
    }

    fn encode_evidence(&self, evidence: &EvidenceSet) -> Result<Vec<Option<usize>>> {
        let mut fixed = vec![None; self.nodes.len()];
        for (key, label) in evidence {
            let i = self.idx(key)?;
            let v = self.nodes[i].domain.iter().position(|l| l == label).ok_or_else(|| {
                InferenceError::LabelOutOfDomain {
                    node: key.clone(),
                    label: label.clone(),
                }
            })?;
            fixed[i] = Some(v);
        }
        Ok(fixed)
    }

    /// Topologically ordered ancestors of the given nodes, inclusive.
    fn ancestral_set(&self, seeds: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut keep = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = seeds.into_iter().collect();
        while let Some(i) = stack.pop() {
            if !keep[i] {
                keep[i] = true;
                stack.extend(self.nodes[i].parents.iter().copied());
            }
        }
        (0..self.nodes.len()).filter(|&i| keep[i]).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate(
        &self,
        order: &[usize],
        depth: usize,
        fixed: &[Option<usize>],
        assign: &mut [usize],
        weight: f64,
        query: usize,
        acc: &mut [f64],
    ) {
        if weight == 0.0 {
            return;
        }
        let Some(&i) = order.get(depth) else {
            acc[assign[query]] += weight;
            return;
        };
        match fixed[i] {
            Some(v) => {
                assign[i] = v;
                let w = weight * self.prob(i, assign);
                self.enumerate(order, depth + 1, fixed, assign, w, query, acc);
            }
            None => {
                for v in 0..self.nodes[i].card() {
                    assign[i] = v;
                    let w = weight * self.prob(i, assign);
                    self.enumerate(order, depth + 1, fixed, assign, w, query, acc);
                }
            }
        }
    }

    /// Exact posterior of `query` given `evidence`.
    pub fn posterior(&self, evidence: &EvidenceSet, query: &NodeRef) -> Result<Distribution> {
        let q = self.idx(query)?;
        let fixed = self.encode_evidence(evidence)?;
        let order = self.ancestral_set(std::iter::once(q).chain((0..self.nodes.len()).filter(|&i| fixed[i].is_some())));
        let mut acc = vec![0.0; self.nodes[q].card()];
        let mut assign = vec![0; self.nodes.len()];
        self.enumerate(&order, 0, &fixed, &mut assign, 1.0, q, &mut acc);
        normalize(&self.nodes[q].domain, acc).ok_or(InferenceError::ZeroProbabilityEvidence)
    }

    /// Likelihood-weighting estimate; bit-reproducible for a fixed seed.
    pub fn approx_posterior(
        &self,
        evidence: &EvidenceSet,
        query: &NodeRef,
        n_samples: usize,
        seed: u64,
    ) -> Result<Distribution> {
        if n_samples == 0 {
            return Err(InferenceError::NoSamples);
        }
        let q = self.idx(query)?;
        let fixed = self.encode_evidence(evidence)?;
        let order = self.ancestral_set(std::iter::once(q).chain((0..self.nodes.len()).filter(|&i| fixed[i].is_some())));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; self.nodes[q].card()];
        let mut assign = vec![0; self.nodes.len()];
        for _ in 0..n_samples {
            let mut w = 1.0;
            for &i in &order {
                match fixed[i] {
                    Some(v) => {
                        assign[i] = v;
                        w *= self.prob(i, &assign);
                    }
                    None => assign[i] = self.draw(i, &assign, &mut rng),
                }
            }
            acc[assign[q]] += w;
        }
        normalize(&self.nodes[q].domain, acc).ok_or(InferenceError::AllZeroWeights)
    }

    fn draw(&self, node: usize, assign: &[usize], rng: &mut impl Rng) -> usize {
        let start = self.row_start(node, assign);
        let row = &self.nodes[node].table[start..start + self.nodes[node].card()];
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (v, p) in row.iter().enumerate() {
            if *p > 0.0 {
                last_positive = v;
            }
            cum += p;
            if u < cum {
                return v;
            }
        }
        last_positive
    }

    /// Forward (ancestral) samples of every node.
    pub fn sample_joint(&self, n_samples: usize, seed: u64) -> Vec<Assignment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assign = vec![0; self.nodes.len()];
        (0..n_samples)
            .map(|_| {
                for i in 0..self.nodes.len() {
                    assign[i] = self.draw(i, &assign, &mut rng);
                }
                self.nodes
                    .iter()
                    .zip(&assign)
                    .map(|(n, &v)| (n.key.clone(), n.domain[v].clone()))
                    .collect()
            })
            .collect()
    }

    /// Abstract nodes whose Markov blanket contains a changed node.
    pub fn affected_by(&self, changed: &BTreeSet<NodeRef>) -> Vec<NodeRef> {
        let changed: BTreeSet<usize> = changed.iter().filter_map(|k| self.index.get(k).copied()).collect();
        if changed.is_empty() {
            return Vec::new();
        }
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind == VariableKind::Abstract)
            .filter(|&i| self.blanket(i).iter().any(|j| changed.contains(j)))
            .map(|i| self.nodes[i].key.clone())
            .collect()
    }

    /// Current non-stale perceived values of the network's nodes.
    pub fn evidence_from(&self, store: &ModelStore, now: u64) -> EvidenceSet {
        self.nodes
            .iter()
            .filter(|n| n.kind == VariableKind::Perceived)
            .filter_map(|n| {
                store
                    .fresh_value(&n.key, now)
                    .ok()
                    .flatten()
                    .map(|v| (n.key.clone(), v.value.clone()))
            })
            .collect()
    }
}

fn normalize(labels: &[String], acc: Vec<f64>) -> Option<Distribution> {
    let total: f64 = acc.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    Some(Distribution::new(
        labels.to_vec(),
        acc.into_iter().map(|w| w / total).collect(),
    ))
}

/// One recomputed abstract node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeUpdate {
    pub node: NodeRef,
    pub posterior: Distribution,
    pub label: String,
    /// Whether the committed value changed.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDiagnostic {
    pub node: NodeRef,
    pub error: InferenceError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    pub updates: Vec<NodeUpdate>,
    pub diagnostics: Vec<UpdateDiagnostic>,
}

/// Recomputes every abstract node whose Markov blanket intersects `changed`,
/// commits MAP labels at `timestamp` and publishes the posteriors.
///
/// Contradictory evidence leaves the previous value committed and yields a
/// diagnostic instead.
pub fn update_on_change(
    net: &BayesNet,
    store: &mut ModelStore,
    changed: &BTreeSet<NodeRef>,
    timestamp: u64,
) -> UpdateReport {
    let mut report = UpdateReport::default();
    let targets = net.affected_by(changed);
    if targets.is_empty() {
        return report;
    }
    let evidence = net.evidence_from(store, timestamp);
    for node in targets {
        let posterior = match net.posterior(&evidence, &node) {
            Ok(d) => d,
            Err(error) => {
                report.diagnostics.push(UpdateDiagnostic { node, error });
                continue;
            }
        };
        let label = map_value(&posterior).to_string();
        let changed = match store.commit_value(&node, &label, timestamp, Source::Inference) {
            Ok(out) => out.changed,
            Err(e) => {
                // Unreachable with a monotone engine clock.
                log::warn!("inference commit rejected for {node}: {e}");
                false
            }
        };
        store.publish_posterior(&node, posterior.clone());
        report.updates.push(NodeUpdate {
            node,
            posterior,
            label,
            changed,
        });
    }
    report
}

/// Laplace-smoothed conditional frequencies:
/// `P(v | pa) = (count(v, pa) + alpha) / (count(pa) + alpha * |domain|)`.
///
/// An empty log yields uniform rows.
pub fn fit_cpt(
    log: &[Assignment],
    node: &NodeRef,
    parents: &[NodeRef],
    alpha: f64,
    domains: &impl Domains,
) -> Result<Cpt> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(InferenceError::InvalidAlpha(alpha));
    }
    let domain_of = |k: &NodeRef| {
        domains
            .domain_of(k)
            .ok_or_else(|| InferenceError::UnknownNode(k.clone()))
    };
    let child_domain = domain_of(node)?;
    let parent_domains = parents.iter().map(domain_of).collect::<Result<Vec<_>>>()?;
    let card = child_domain.len();
    let n_rows: usize = parent_domains.iter().map(|d| d.len()).product();
    let mut counts = vec![0.0_f64; n_rows * card];

    let label_index = |k: &NodeRef, d: &[String], label: &str| {
        d.iter()
            .position(|l| l == label)
            .ok_or_else(|| InferenceError::LabelOutOfDomain {
                node: k.clone(),
                label: label.to_string(),
            })
    };
    for (i, record) in log.iter().enumerate() {
        let field = |k: &NodeRef| {
            record.get(k).ok_or_else(|| InferenceError::MissingField {
                record: i,
                node: k.clone(),
            })
        };
        let mut r = 0;
        for (p, d) in parents.iter().zip(&parent_domains) {
            r = r * d.len() + label_index(p, d, field(p)?)?;
        }
        let v = label_index(node, child_domain, field(node)?)?;
        counts[r * card + v] += 1.0;
    }

    let rows = (0..n_rows)
        .map(|r| {
            let row = &counts[r * card..(r + 1) * card];
            let total: f64 = row.iter().sum();
            let denom = total + alpha * card as f64;
            let mut rest = r;
            let mut given = vec![String::new(); parents.len()];
            for (slot, d) in parent_domains.iter().enumerate().rev() {
                given[slot] = d[rest % d.len()].clone();
                rest /= d.len();
            }
            CptRow {
                given,
                p: row.iter().map(|c| (c + alpha) / denom).collect(),
            }
        })
        .collect();
    Ok(Cpt {
        node: node.clone(),
        parents: parents.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ModelChain, VariableSpec};

    fn key(s: &str) -> NodeRef {
        s.parse().unwrap()
    }

    fn row(given: &[&str], p: &[f64]) -> CptRow {
        CptRow {
            given: given.iter().map(|s| s.to_string()).collect(),
            p: p.to_vec(),
        }
    }

    fn cpt(node: &str, parents: &[&str], rows: Vec<CptRow>) -> Cpt {
        Cpt {
            node: key(node),
            parents: parents.iter().map(|p| key(p)).collect(),
            rows,
        }
    }

    fn ego_store(vars: &[(&str, VariableKind, &[&str])]) -> ModelStore {
        let mut s = ModelStore::default();
        for (name, kind, dom) in vars {
            s.declare_variable(&ModelChain::ego(), VariableSpec::new(*name, *kind, dom.iter().copied()))
                .unwrap();
        }
        s
    }

    /// Pointing fixture: U -> Gaze with U a root.
    fn pointing() -> (ModelStore, BayesNet) {
        let mut s = ModelStore::default();
        s.register_agent("child").unwrap();
        let child: ModelChain = "[child]".parse().unwrap();
        s.declare_variable(&child, VariableSpec::abstract_var("understood_pointing", ["yes", "no"]))
            .unwrap();
        s.declare_variable(
            &child,
            VariableSpec::perceived("child_gaze_target", ["hand", "object", "elsewhere"]),
        )
        .unwrap();
        let net = build_network(
            &[
                cpt("[child].understood_pointing", &[], vec![row(&[], &[0.5, 0.5])]),
                cpt(
                    "[child].child_gaze_target",
                    &["[child].understood_pointing"],
                    vec![row(&["yes"], &[0.1, 0.8, 0.1]), row(&["no"], &[0.6, 0.1, 0.3])],
                ),
            ],
            &s,
        )
        .unwrap();
        (s, net)
    }

    fn deterministic(prior: [f64; 2]) -> (ModelStore, BayesNet) {
        let s = ego_store(&[
            ("a", VariableKind::Abstract, &["a1", "a2"]),
            ("b", VariableKind::Perceived, &["b1", "b2"]),
        ]);
        let net = build_network(
            &[
                cpt("[].a", &[], vec![row(&[], &prior)]),
                cpt(
                    "[].b",
                    &["[].a"],
                    vec![row(&["a1"], &[1.0, 0.0]), row(&["a2"], &[0.0, 1.0])],
                ),
            ],
            &s,
        )
        .unwrap();
        (s, net)
    }

    fn ev(pairs: &[(&str, &str)]) -> EvidenceSet {
        pairs.iter().map(|(k, v)| (key(k), v.to_string())).collect()
    }

    #[test]
    fn build_rejects_bad_networks() {
        let s = ego_store(&[
            ("a", VariableKind::Abstract, &["x", "y"]),
            ("b", VariableKind::Perceived, &["x", "y"]),
        ]);
        let err = build_network(&[cpt("[].a", &[], vec![row(&[], &[0.5, 0.4])])], &s).unwrap_err();
        assert!(matches!(err, InferenceError::RowNotNormalized { ref node, .. } if node == &key("[].a")));

        let cyc = build_network(
            &[
                cpt(
                    "[].a",
                    &["[].b"],
                    vec![row(&["x"], &[0.5, 0.5]), row(&["y"], &[0.5, 0.5])],
                ),
                cpt(
                    "[].b",
                    &["[].a"],
                    vec![row(&["x"], &[0.5, 0.5]), row(&["y"], &[0.5, 0.5])],
                ),
            ],
            &s,
        );
        assert!(matches!(cyc, Err(InferenceError::CycleDetected(_))));

        let missing = build_network(
            &[cpt(
                "[].b",
                &["[].a"],
                vec![row(&["x"], &[0.5, 0.5]), row(&["y"], &[0.5, 0.5])],
            )],
            &s,
        );
        assert_eq!(missing.unwrap_err(), InferenceError::MissingCpt(key("[].a")));

        let unknown = build_network(&[cpt("[].zzz", &[], vec![row(&[], &[0.5, 0.5])])], &s);
        assert_eq!(unknown.unwrap_err(), InferenceError::UnknownNode(key("[].zzz")));

        let dup = build_network(
            &[
                cpt("[].a", &[], vec![row(&[], &[0.5, 0.5])]),
                cpt("[].a", &[], vec![row(&[], &[0.5, 0.5])]),
            ],
            &s,
        );
        assert_eq!(dup.unwrap_err(), InferenceError::DuplicateCpt(key("[].a")));

        let short = build_network(
            &[
                cpt("[].a", &[], vec![row(&[], &[0.5, 0.5])]),
                cpt("[].b", &["[].a"], vec![row(&["x"], &[0.5, 0.5])]),
            ],
            &s,
        );
        assert!(matches!(short, Err(InferenceError::MissingRow { .. })));
    }

    #[test]
    fn pointing_posteriors() {
        let (_, net) = pointing();
        let u = key("[child].understood_pointing");
        let hand = net
            .posterior(&ev(&[("[child].child_gaze_target", "hand")]), &u)
            .unwrap();
        assert!((hand.prob("yes").unwrap() - 0.05 / 0.35).abs() < 1e-12);
        assert_eq!(map_value(&hand), "no");
        let object = net
            .posterior(&ev(&[("[child].child_gaze_target", "object")]), &u)
            .unwrap();
        assert!((object.prob("yes").unwrap() - 0.4 / 0.45).abs() < 1e-12);
        let prior = net.posterior(&EvidenceSet::new(), &u).unwrap();
        assert_eq!(prior.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn deterministic_inversion_and_contradiction() {
        let (_, net) = deterministic([0.5, 0.5]);
        let d = net.posterior(&ev(&[("[].b", "b1")]), &key("[].a")).unwrap();
        assert_eq!(d.probs, vec![1.0, 0.0]);
        for seed in [0, 1, 42, u64::MAX] {
            let d = net
                .approx_posterior(&ev(&[("[].b", "b1")]), &key("[].a"), 500, seed)
                .unwrap();
            assert_eq!(d.probs, vec![1.0, 0.0]);
        }

        let (_, net) = deterministic([0.0, 1.0]);
        assert_eq!(
            net.posterior(&ev(&[("[].b", "b1")]), &key("[].a")),
            Err(InferenceError::ZeroProbabilityEvidence)
        );
        assert_eq!(
            net.approx_posterior(&ev(&[("[].b", "b1")]), &key("[].a"), 100, 3),
            Err(InferenceError::AllZeroWeights)
        );
    }

    #[test]
    fn sampler_guards_and_reproducibility() {
        let (_, net) = pointing();
        let u = key("[child].understood_pointing");
        let e = ev(&[("[child].child_gaze_target", "hand")]);
        assert_eq!(net.approx_posterior(&e, &u, 0, 1), Err(InferenceError::NoSamples));
        let a = net.approx_posterior(&e, &u, 100_000, 42).unwrap();
        let b = net.approx_posterior(&e, &u, 100_000, 42).unwrap();
        assert_eq!(a, b);
        assert!((a.prob("yes").unwrap() - 0.05 / 0.35).abs() < 0.01);
    }

    #[test]
    fn map_value_ties_and_point_mass() {
        let labels = vec!["yes".to_string(), "no".to_string()];
        assert_eq!(
            map_value(&Distribution::new(labels.clone(), vec![0.142857, 0.857143])),
            "no"
        );
        assert_eq!(map_value(&Distribution::new(labels.clone(), vec![0.5, 0.5])), "yes");
        assert_eq!(map_value(&Distribution::point_mass(labels, 1)), "no");
    }

    #[test]
    fn markov_blanket_and_affected() {
        // s -> u -> g, c -> g
        let s = ego_store(&[
            ("s", VariableKind::Perceived, &["y", "n"]),
            ("u", VariableKind::Abstract, &["y", "n"]),
            ("c", VariableKind::Perceived, &["y", "n"]),
            ("g", VariableKind::Perceived, &["y", "n"]),
            ("far", VariableKind::Perceived, &["y", "n"]),
        ]);
        let half = |given: &[&str]| row(given, &[0.5, 0.5]);
        let net = build_network(
            &[
                cpt("[].s", &[], vec![half(&[])]),
                cpt("[].u", &["[].s"], vec![half(&["y"]), half(&["n"])]),
                cpt("[].c", &[], vec![half(&[])]),
                cpt(
                    "[].g",
                    &["[].u", "[].c"],
                    vec![
                        half(&["y", "y"]),
                        half(&["y", "n"]),
                        half(&["n", "y"]),
                        half(&["n", "n"]),
                    ],
                ),
                cpt("[].far", &["[].g"], vec![half(&["y"]), half(&["n"])]),
            ],
            &s,
        )
        .unwrap();
        let mb = net.markov_blanket(&key("[].u")).unwrap();
        assert_eq!(mb, [key("[].s"), key("[].g"), key("[].c")].into_iter().collect());
        let only_far: BTreeSet<_> = [key("[].far")].into_iter().collect();
        assert!(net.affected_by(&only_far).is_empty());
        let both: BTreeSet<_> = [key("[].g"), key("[].c")].into_iter().collect();
        assert_eq!(net.affected_by(&both), vec![key("[].u")]);
        let outside: BTreeSet<_> = [key("[].unrelated")].into_iter().collect();
        assert!(net.affected_by(&outside).is_empty());
    }

    #[test]
    fn update_commits_map_and_keeps_value_on_contradiction() {
        let (mut store, net) = pointing();
        let g = key("[child].child_gaze_target");
        let u = key("[child].understood_pointing");
        store.commit_value(&g, "object", 100, Source::Perception).unwrap();
        let changed: BTreeSet<_> = [g.clone()].into_iter().collect();
        let report = update_on_change(&net, &mut store, &changed, 100);
        assert_eq!(report.updates.len(), 1);
        assert!((report.updates[0].posterior.prob("yes").unwrap() - 0.4 / 0.45).abs() < 1e-12);
        assert_eq!(store.get_value(&u).unwrap().unwrap().value, "yes");
        assert_eq!(store.get_value(&u).unwrap().unwrap().source, Source::Inference);
        assert!(store.posterior(&u).is_some());

        let (mut store, net) = deterministic([0.0, 1.0]);
        let b = key("[].b");
        let a = key("[].a");
        store.commit_value(&b, "b2", 1, Source::Harness).unwrap();
        let changed: BTreeSet<_> = [b.clone()].into_iter().collect();
        let r = update_on_change(&net, &mut store, &changed, 1);
        assert_eq!(r.updates[0].label, "a2");
        store.commit_value(&b, "b1", 2, Source::Harness).unwrap();
        let r = update_on_change(&net, &mut store, &changed, 2);
        assert!(r.updates.is_empty());
        assert_eq!(r.diagnostics[0].error, InferenceError::ZeroProbabilityEvidence);
        assert_eq!(store.get_value(&a).unwrap().unwrap().value, "a2");
    }

    #[test]
    fn fit_cpt_counts() {
        let s = ego_store(&[
            ("u", VariableKind::Abstract, &["yes", "no"]),
            ("g", VariableKind::Perceived, &["a", "b", "c"]),
        ]);
        let log: Vec<Assignment> = ["yes", "yes", "yes", "no"]
            .iter()
            .map(|v| [(key("[].u"), v.to_string())].into_iter().collect())
            .collect();
        let c = fit_cpt(&log, &key("[].u"), &[], 1.0, &s).unwrap();
        assert_eq!(c.rows.len(), 1);
        assert!((c.rows[0].p[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((c.rows[0].p[1] - 2.0 / 6.0).abs() < 1e-15);

        let c = fit_cpt(&[], &key("[].g"), &[], 1.0, &s).unwrap();
        assert_eq!(c.rows[0].p, vec![1.0 / 3.0; 3]);

        let err = fit_cpt(&log, &key("[].g"), &[key("[].u")], 1.0, &s).unwrap_err();
        assert!(matches!(err, InferenceError::MissingField { record: 0, .. }));
        assert_eq!(
            fit_cpt(&log, &key("[].u"), &[], 0.0, &s).unwrap_err(),
            InferenceError::InvalidAlpha(0.0)
        );

        // fitted tables are accepted by the validator
        let c = fit_cpt(&[], &key("[].g"), &[key("[].u")], 0.5, &s).unwrap();
        let u = fit_cpt(&log, &key("[].u"), &[], 1.0, &s).unwrap();
        build_network(&[u, c], &s).unwrap();
    }
}
