//! Python bindings: scenarios, replay, traces, inference and learning.
//!
//! Structured results (records, tables, reports) cross the boundary as
//! plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mutmod_core::decision::learn_from_log;
use mutmod_core::harness::{self, fixtures, Input, Replay, Scenario, TimelineEntry, Trace};
use mutmod_core::inference::{Assignment, EvidenceSet};
use mutmod_core::{ActionTemplate, AutonomyMode, BayesNet, Distribution, HumanVerdict, Scalar, SlotKey};

create_exception!(mutmod, MutmodError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    MutmodError::new_err(e.to_string())
}

fn slot(s: &str) -> PyResult<SlotKey> {
    s.parse().map_err(err)
}

fn mode(s: &str) -> PyResult<AutonomyMode> {
    s.parse().map_err(|_| err(format!("unknown mode {s:?}")))
}

/// Serializable value to the equivalent Python object.
fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn distribution(py: Python<'_>, d: &Distribution) -> PyResult<Py<PyDict>> {
    let out = PyDict::new(py);
    for (l, p) in d.labels.iter().zip(&d.probs) {
        out.set_item(l, p)?;
    }
    Ok(out.unbind())
}

fn labels(m: BTreeMap<String, String>) -> PyResult<BTreeMap<SlotKey, String>> {
    m.into_iter().map(|(k, v)| Ok((slot(&k)?, v))).collect()
}

#[pyclass(name = "Scenario", frozen)]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        harness::load_scenario(path).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        harness::parse_scenario(text, None)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// The built-in pointing scenario.
    #[staticmethod]
    #[pyo3(signature = (mode = "autonomous"))]
    fn pointing(mode: &str) -> PyResult<Self> {
        Ok(Self {
            inner: fixtures::pointing_scenario(self::mode(mode)?),
        })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.declarations.mode.to_string()
    }

    fn with_mode(&self, mode: &str) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.declarations.mode = self::mode(mode)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (seed = 0))]
    fn run(&self, seed: u64) -> PyResult<PyTrace> {
        harness::run(&self.inner, seed)
            .map(|inner| PyTrace { inner })
            .map_err(err)
    }

    /// One `(passed, line)` pair per expectation.
    fn check(&self, trace: &PyTrace) -> Vec<(bool, String)> {
        harness::check(&trace.inner, &self.inner.expectations)
            .outcomes
            .iter()
            .map(|o| (o.passed, o.to_string()))
            .collect()
    }

    fn network(&self) -> PyResult<PyBayesNet> {
        let engine = self.inner.engine(0).map_err(err)?;
        engine
            .network()
            .cloned()
            .map(|inner| PyBayesNet { inner })
            .ok_or_else(|| err("scenario declares no network"))
    }

    fn to_document(&self) -> String {
        self.inner.to_document()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario({:?}, mode={}, entries={})",
            self.inner.name,
            self.inner.declarations.mode,
            self.inner.timeline.len()
        )
    }
}

#[pyclass(name = "Trace", frozen)]
struct PyTrace {
    inner: Trace,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Trace::from_text(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        harness::import_trace(path).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        harness::export_trace(&self.inner, path).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn records(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.records)
    }

    /// Actions the engine executed without human review.
    fn engine_actions(&self) -> usize {
        self.inner.engine_actions()
    }

    fn joint_assignments(&self) -> Vec<BTreeMap<String, String>> {
        self.inner
            .joint_assignments()
            .into_iter()
            .map(|a| a.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
            .collect()
    }

    fn decision_records(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.decision_records())
    }

    /// Fits one node from the states in this trace that assign it and its
    /// parents.
    #[pyo3(signature = (node, parents = Vec::new(), alpha = 1.0))]
    fn fit_cpt(&self, py: Python<'_>, node: &str, parents: Vec<String>, alpha: f64) -> PyResult<Py<PyAny>> {
        let node = slot(node)?;
        let parents = parents.iter().map(|p| slot(p)).collect::<PyResult<Vec<_>>>()?;
        let log: Vec<Assignment> = self
            .inner
            .joint_assignments()
            .into_iter()
            .filter(|a| a.contains_key(&node) && parents.iter().all(|p| a.contains_key(p)))
            .collect();
        let cpt = mutmod_core::fit_cpt(&log, &node, &parents, alpha, &self.inner.domains()).map_err(err)?;
        to_py(py, &cpt)
    }

    #[pyo3(signature = (features, alpha = 1.0))]
    fn learn_policy(&self, py: Python<'_>, features: Vec<String>, alpha: f64) -> PyResult<Py<PyAny>> {
        let features = features.iter().map(|f| slot(f)).collect::<PyResult<Vec<_>>>()?;
        let policy = learn_from_log(&self.inner.decision_records(), &features, alpha).map_err(err)?;
        to_py(py, &policy)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    fn __eq__(&self, other: &PyTrace) -> bool {
        self.inner == other.inner
    }
}

/// Step-by-step replay: feed inputs at virtual times, inspect the model,
/// then `finish()` for the trace.
#[pyclass(name = "Replay", frozen)]
struct PyReplay {
    // the engine's notification receivers are Send but not Sync
    inner: Mutex<Option<Replay>>,
}

impl PyReplay {
    fn with<R>(&self, f: impl FnOnce(&mut Replay) -> PyResult<R>) -> PyResult<R> {
        let mut guard = self
            .inner
            .lock()
            .map_err(|_| err("replay poisoned by an earlier panic"))?;
        f(guard.as_mut().ok_or_else(|| err("replay already finished"))?)
    }

    fn apply(&self, py: Python<'_>, t: u64, input: Input) -> PyResult<Py<PyAny>> {
        self.with(|r| {
            let (records, refused) = r.apply_command(&TimelineEntry { t, input });
            match refused {
                Some(e) => Err(err(e)),
                None => to_py(py, &records),
            }
        })
    }
}

#[pymethods]
impl PyReplay {
    #[new]
    #[pyo3(signature = (scenario, seed = 0))]
    fn new(scenario: &PyScenario, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Mutex::new(Some(Replay::new(&scenario.inner, seed).map_err(err)?)),
        })
    }

    /// A sensor event; payload values are numbers or strings.
    fn event(
        &self,
        py: Python<'_>,
        t: u64,
        sensor: String,
        payload: BTreeMap<String, Bound<'_, PyAny>>,
    ) -> PyResult<Py<PyAny>> {
        let payload = payload
            .into_iter()
            .map(|(k, v)| {
                let s = match v.extract::<f64>() {
                    Ok(x) => Scalar::Number(x),
                    Err(_) => Scalar::Token(v.extract::<String>()?),
                };
                Ok((k, s))
            })
            .collect::<PyResult<_>>()?;
        self.apply(py, t, Input::Event { sensor, payload })
    }

    fn set_mode(&self, py: Python<'_>, t: u64, mode: &str) -> PyResult<Py<PyAny>> {
        let mode = self::mode(mode)?;
        self.apply(py, t, Input::SetMode { mode })
    }

    #[pyo3(signature = (t, verb, params = BTreeMap::new()))]
    fn wizard(&self, py: Python<'_>, t: u64, verb: &str, params: BTreeMap<String, String>) -> PyResult<Py<PyAny>> {
        let mut action = ActionTemplate::new(verb);
        action.params = params;
        self.apply(py, t, Input::Wizard { action })
    }

    fn verdict(&self, py: Python<'_>, t: u64, proposal: String, approve: bool) -> PyResult<Py<PyAny>> {
        let verdict = if approve {
            HumanVerdict::Approve
        } else {
            HumanVerdict::Reject
        };
        self.apply(py, t, Input::Verdict { proposal, verdict })
    }

    fn value(&self, name: &str) -> PyResult<Option<String>> {
        let key = slot(name)?;
        self.with(|r| {
            let v = r.engine().store().get_value(&key).map_err(err)?;
            Ok(v.map(|v| v.value.clone()))
        })
    }

    fn posterior(&self, py: Python<'_>, name: &str) -> PyResult<Option<Py<PyDict>>> {
        let key = slot(name)?;
        self.with(|r| {
            r.engine()
                .store()
                .posterior(&key)
                .map(|d| distribution(py, d))
                .transpose()
        })
    }

    /// Ids of proposals awaiting a verdict.
    fn pending(&self) -> PyResult<Vec<String>> {
        self.with(|r| Ok(r.engine().pipeline().pending().map(|p| p.id.clone()).collect()))
    }

    #[getter]
    fn mode(&self) -> PyResult<String> {
        self.with(|r| Ok(r.engine().mode().to_string()))
    }

    #[getter]
    fn now(&self) -> PyResult<u64> {
        self.with(|r| Ok(r.engine().now()))
    }

    /// Expires pending proposals and returns the trace.
    fn finish(&self) -> PyResult<PyTrace> {
        let mut guard = self
            .inner
            .lock()
            .map_err(|_| err("replay poisoned by an earlier panic"))?;
        let r = guard.take().ok_or_else(|| err("replay already finished"))?;
        Ok(PyTrace { inner: r.finish() })
    }
}

#[pyclass(name = "BayesNet", frozen)]
struct PyBayesNet {
    inner: BayesNet,
}

impl PyBayesNet {
    fn evidence(evidence: BTreeMap<String, String>) -> PyResult<EvidenceSet> {
        labels(evidence)
    }
}

#[pymethods]
impl PyBayesNet {
    /// The pointing fixture network.
    #[staticmethod]
    fn pointing() -> PyResult<Self> {
        mutmod_core::build_network(&fixtures::pointing_cpts(), &fixtures::pointing_store())
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn nodes(&self) -> Vec<String> {
        self.inner.nodes().map(ToString::to_string).collect()
    }

    fn markov_blanket(&self, node: &str) -> PyResult<Vec<String>> {
        let b = self.inner.markov_blanket(&slot(node)?).map_err(err)?;
        Ok(b.iter().map(ToString::to_string).collect())
    }

    /// Exact posterior of `query` as `{label: probability}`.
    #[pyo3(signature = (query, evidence = BTreeMap::new()))]
    fn posterior(&self, py: Python<'_>, query: &str, evidence: BTreeMap<String, String>) -> PyResult<Py<PyDict>> {
        let d = self
            .inner
            .posterior(&Self::evidence(evidence)?, &slot(query)?)
            .map_err(err)?;
        distribution(py, &d)
    }

    /// Likelihood-weighting estimate; the same seed gives the same answer.
    #[pyo3(signature = (query, evidence = BTreeMap::new(), samples = 10_000, seed = 0))]
    fn approx_posterior(
        &self,
        py: Python<'_>,
        query: &str,
        evidence: BTreeMap<String, String>,
        samples: usize,
        seed: u64,
    ) -> PyResult<Py<PyDict>> {
        let d = self
            .inner
            .approx_posterior(&Self::evidence(evidence)?, &slot(query)?, samples, seed)
            .map_err(err)?;
        distribution(py, &d)
    }

    /// Draws `n` joint assignments by forward sampling.
    fn sample(&self, n: usize, seed: u64) -> Vec<BTreeMap<String, String>> {
        self.inner
            .sample_joint(n, seed)
            .into_iter()
            .map(|a| a.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
            .collect()
    }
}

/// Laplace-smoothed table for `node` from a list of joint assignments.
#[pyfunction]
#[pyo3(signature = (log, node, domains, parents = Vec::new(), alpha = 1.0))]
fn fit_cpt(
    py: Python<'_>,
    log: Vec<BTreeMap<String, String>>,
    node: &str,
    domains: BTreeMap<String, Vec<String>>,
    parents: Vec<String>,
    alpha: f64,
) -> PyResult<Py<PyAny>> {
    let log = log.into_iter().map(labels).collect::<PyResult<Vec<_>>>()?;
    let domains = domains
        .into_iter()
        .map(|(k, v)| Ok((slot(&k)?, v)))
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    let parents = parents.iter().map(|p| slot(p)).collect::<PyResult<Vec<_>>>()?;
    let cpt = mutmod_core::fit_cpt(&log, &slot(node)?, &parents, alpha, &domains).map_err(err)?;
    to_py(py, &cpt)
}

#[pymodule]
fn mutmod(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MutmodError", m.py().get_type::<MutmodError>())?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyReplay>()?;
    m.add_class::<PyBayesNet>()?;
    m.add_function(wrap_pyfunction!(fit_cpt, m)?)?;
    Ok(())
}
