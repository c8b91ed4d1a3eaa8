//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Reference values come from oracles in test code (`common`): hand Bayes
//! rule for the pointing fixture, brute-force joint summation over the raw
//! CPT rows, and plain counting for learning.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{bayes_pointing, brute_force, evidence_sets};
use mutmod_core::decision::{learn_from_log, select_action_autonomous, NO_ACTION};
use mutmod_core::engine::{Declarations, Engine, EngineEvent};
use mutmod_core::harness::fixtures::{self, EXAGGERATE, GAZE, SAW_GESTURE, UNDERSTOOD};
use mutmod_core::harness::gen::{self, GenConfig};
use mutmod_core::harness::{load_scenario, run, run_timed, Input, Scenario, TimelineEntry, Trace};
use mutmod_core::inference::{build_network, fit_cpt, Assignment, EvidenceSet};
use mutmod_core::perception::Scalar;
use mutmod_core::{ActionTemplate, AutonomyMode, ModelStore, ProposalStatus, SlotKey, VariableSpec};

const POINTING_TOL: f64 = 1e-6;
const POINTING_BUDGET: Duration = Duration::from_secs(1);
const ORACLE_NETWORKS: usize = 200;
const ORACLE_MAX_NODES: usize = 6;
const ORACLE_MAX_LABELS: usize = 3;
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const SAMPLER_SAMPLES: usize = 100_000;
const SAMPLER_SEEDS: u64 = 20;
const SAMPLER_MEAN_TOL: f64 = 0.01;
const SAMPLER_MAX_TOL: f64 = 0.03;
const RANDOM_REPLAYS: u64 = 10;
const MODE_SAFETY_RUNS: u64 = 100;
const FIT_SAMPLES: usize = 10_000;
const FIT_ALPHA: f64 = 1.0;
const FIT_TOL: f64 = 0.02;
const POLICY_MIN_SUPPORT: usize = 10;
const MEDIAN_BUDGET: Duration = Duration::from_millis(5);
const P99_BUDGET: Duration = Duration::from_millis(50);

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn slot(s: &str) -> SlotKey {
    s.parse().unwrap()
}

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn majority(counts: &BTreeMap<String, usize>) -> &str {
    // BTreeMap iterates verbs in order, so the first maximum is the
    // lexicographically smallest.
    let best = counts.values().copied().max().unwrap();
    counts.iter().find(|(_, &c)| c == best).unwrap().0
}

fn pointing_reproduction() -> Outcome {
    let start = Instant::now();
    let s = load_scenario(scenarios_dir().join("pointing.mmd")).map_err(|e| e.to_string())?;
    let expected = bayes_pointing(0.5, 0);

    let mut auto = s.clone();
    auto.declarations.mode = AutonomyMode::Autonomous;
    let trace = run(&auto, 0).map_err(|e| e.to_string())?;
    let u = slot(UNDERSTOOD);
    let events: Vec<&EngineEvent> = trace.engine_events().map(|(_, e)| e).collect();
    let post_at = events
        .iter()
        .position(|e| {
            matches!(e, EngineEvent::Posterior { slot, distribution, .. }
            if *slot == u && (distribution.prob("yes").unwrap() - expected).abs() <= POINTING_TOL)
        })
        .ok_or_else(|| format!("no posterior within {POINTING_TOL} of {expected:.6}"))?;
    let got = match events[post_at] {
        EngineEvent::Posterior { distribution, .. } => distribution.prob("yes").unwrap(),
        _ => unreachable!(),
    };
    let acted = events[post_at..]
        .iter()
        .any(|e| matches!(e, EngineEvent::ActionExecuted { action, .. } if action.verb == EXAGGERATE));
    ensure(acted, || "no executed exaggerate_gesture after the posterior".into())?;

    let mut wiz = s;
    wiz.declarations.mode = AutonomyMode::Wizard;
    let trace = run(&wiz, 0).map_err(|e| e.to_string())?;
    let suppressed = trace.engine_events().any(|(_, e)| {
        matches!(
            e,
            EngineEvent::ProposalResolved {
                status: ProposalStatus::Suppressed,
                ..
            }
        )
    });
    ensure(suppressed, || "wizard run has no suppressed proposal".into())?;
    ensure(trace.engine_actions() == 0, || {
        format!("wizard run executed {} engine actions", trace.engine_actions())
    })?;
    let took = start.elapsed();
    ensure(took < POINTING_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "P(yes|hand) = {got:.9} (oracle {expected:.9}); wizard: suppressed, 0 engine actions; {took:.2?}"
    ))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0usize;
    let mut worst = 0.0_f64;
    for n in 0..ORACLE_NETWORKS {
        let net = gen::random_network(&mut rng, ORACLE_MAX_NODES, ORACLE_MAX_LABELS);
        let mut store = ModelStore::default();
        for a in &net.agents {
            store.register_agent(a).unwrap();
        }
        for (c, v) in &net.variables {
            store.declare_variable(c, v.clone()).unwrap();
        }
        let bn = build_network(&net.cpts, &store).map_err(|e| format!("network {n}: {e}"))?;
        for q in net.slots() {
            for ev in evidence_sets(&net, &q) {
                let exact = bn
                    .posterior(&ev, &q)
                    .map_err(|e| format!("network {n}, query {q}: {e}"))?;
                let oracle = brute_force(&net, &ev, &q);
                for (a, b) in exact.probs.iter().zip(&oracle) {
                    worst = worst.max((a - b).abs());
                }
                ensure(worst <= ORACLE_TOL, || {
                    format!("network {n}, query {q}: error {worst:e}")
                })?;
                checked += 1;
            }
        }
    }
    let took = start.elapsed();
    ensure(took < ORACLE_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "{ORACLE_NETWORKS} networks, {checked} query/evidence pairs, max error {worst:.1e}; {took:.2?}"
    ))
}

fn pointing_net() -> mutmod_core::BayesNet {
    build_network(&fixtures::pointing_cpts(), &fixtures::pointing_store()).unwrap()
}

fn sampler_convergence() -> Outcome {
    let net = pointing_net();
    let ev: EvidenceSet = [(slot(GAZE), "hand".to_string())].into();
    let exact = bayes_pointing(0.5, 0);
    let errs: Vec<f64> = (0..SAMPLER_SEEDS)
        .map(|seed| {
            let d = net
                .approx_posterior(&ev, &slot(UNDERSTOOD), SAMPLER_SAMPLES, seed)
                .unwrap();
            (d.prob("yes").unwrap() - exact).abs()
        })
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let max = errs.iter().copied().fold(0.0, f64::max);
    ensure(mean < SAMPLER_MEAN_TOL && max < SAMPLER_MAX_TOL, || {
        format!("mean {mean:.5}, max {max:.5}")
    })?;
    Ok(format!(
        "{SAMPLER_SEEDS} seeds x {SAMPLER_SAMPLES} samples: mean error {mean:.5}, max {max:.5}"
    ))
}

fn ordering_property() -> Outcome {
    let net = pointing_net();
    let u = slot(UNDERSTOOD);
    let p = |gaze: Option<&str>| {
        let ev: EvidenceSet = gaze.map(|g| (slot(GAZE), g.to_string())).into_iter().collect();
        net.posterior(&ev, &u).unwrap().prob("yes").unwrap()
    };
    let (object, prior, hand) = (p(Some("object")), p(None), p(Some("hand")));
    for (got, want) in [
        (object, bayes_pointing(0.5, 1)),
        (prior, 0.5),
        (hand, bayes_pointing(0.5, 0)),
    ] {
        ensure((got - want).abs() < POINTING_TOL, || {
            format!("{got} differs from oracle {want}")
        })?;
    }
    ensure(object > prior && prior > hand, || {
        format!("{object} > {prior} > {hand} fails")
    })?;
    Ok(format!(
        "P(yes|object) {object:.6} > P(yes) {prior:.6} > P(yes|hand) {hand:.6}"
    ))
}

fn replay_determinism() -> Outcome {
    let s = load_scenario(scenarios_dir().join("pointing.mmd")).map_err(|e| e.to_string())?;
    let a = run(&s, 42).unwrap().digest();
    let b = run(&s, 42).unwrap().digest();
    ensure(a == b, || format!("canonical digests differ: {a} vs {b}"))?;
    let mut stable = 0;
    for seed in 0..RANDOM_REPLAYS {
        let s = gen::random_scenario(seed, &GenConfig::default());
        let t1 = run(&s, seed).unwrap();
        let t2 = run(&s, seed).unwrap();
        // also across a save/load of the scenario and the trace
        let reloaded = mutmod_core::harness::parse_scenario(&s.to_document(), None).unwrap();
        let t3 = Trace::from_text(&run(&reloaded, seed).unwrap().to_text()).unwrap();
        if t1.digest() == t2.digest() && t2.digest() == t3.digest() {
            stable += 1;
        }
    }
    ensure(stable == RANDOM_REPLAYS, || {
        format!("{stable}/{RANDOM_REPLAYS} random scenarios stable")
    })?;
    Ok(format!(
        "canonical {}..; {stable}/{RANDOM_REPLAYS} random scenarios digest-stable",
        &a[..12]
    ))
}

fn proposal_accounting(trace: &Trace) -> Result<(usize, usize), String> {
    let mut created = BTreeMap::new();
    let mut terminal: BTreeMap<String, usize> = BTreeMap::new();
    for (_, e) in trace.engine_events() {
        match e {
            EngineEvent::ProposalCreated { proposal } => {
                created.insert(proposal.id.clone(), ());
            }
            EngineEvent::ProposalResolved { id, status } if *status != ProposalStatus::Pending => {
                *terminal.entry(id.clone()).or_default() += 1;
            }
            _ => {}
        }
    }
    let settled = terminal.values().filter(|&&c| c == 1).count();
    ensure(terminal.values().all(|&c| c == 1), || {
        "a proposal resolved twice".into()
    })?;
    ensure(terminal.keys().all(|k| created.contains_key(k)), || {
        "resolution of unknown proposal".into()
    })?;
    ensure(settled == created.len(), || {
        format!("{} created, {settled} settled", created.len())
    })?;
    Ok((created.len(), settled))
}

fn mode_safety() -> Outcome {
    let wizard = GenConfig {
        mode: AutonomyMode::Wizard,
        mode_changes: false,
        ..GenConfig::default()
    };
    let mut proposals = 0;
    for seed in 0..MODE_SAFETY_RUNS {
        let s = gen::random_scenario(1000 + seed, &wizard);
        let trace = run(&s, seed).unwrap();
        ensure(trace.engine_actions() == 0, || {
            format!("seed {seed}: engine acted in wizard mode")
        })?;
        proposals += proposal_accounting(&trace)?.0;
    }
    let mut mixed_total = (0, 0);
    for (i, changes) in [(0u64, false), (1, true)] {
        let cfg = GenConfig {
            mode: AutonomyMode::Mixed,
            mode_changes: changes,
            ..GenConfig::default()
        };
        for seed in 0..MODE_SAFETY_RUNS {
            let s = gen::random_scenario(5000 + 1000 * i + seed, &cfg);
            let mut r = mutmod_core::harness::Replay::new(&s, seed).unwrap();
            for e in &s.timeline {
                r.apply(e);
            }
            r.flush();
            let counts = r.engine().pipeline().counts();
            let sum = counts.pending + counts.executed + counts.rejected + counts.expired + counts.suppressed;
            ensure(sum == counts.created && counts.pending == 0, || {
                format!("seed {seed}: counts {counts:?} do not balance")
            })?;
            if !changes {
                ensure(counts.suppressed == 0 && r.trace().engine_actions() == 0, || {
                    format!("seed {seed}: mixed mode acted without review")
                })?;
            }
            let (c, settled) = proposal_accounting(r.trace())?;
            ensure(c == counts.created, || {
                format!("seed {seed}: trace has {c}, pipeline {}", counts.created)
            })?;
            mixed_total.0 += c;
            mixed_total.1 += settled;
        }
    }
    Ok(format!(
        "{MODE_SAFETY_RUNS} wizard runs, {proposals} proposals, 0 engine actions; mixed: {} created = {} settled",
        mixed_total.0, mixed_total.1
    ))
}

/// The pointing declarations with every node observed by one annotation
/// sensor.
fn annotated(mode: AutonomyMode) -> Declarations {
    let mut d = fixtures::pointing_declarations(mode);
    for (_, v) in &mut d.variables {
        *v = VariableSpec::perceived(v.name.clone(), v.domain.clone());
    }
    d.bindings = [(SAW_GESTURE, "saw"), (UNDERSTOOD, "understood"), (GAZE, "gaze")]
        .into_iter()
        .map(|(s, f)| mutmod_core::perception::SensorBinding {
            sensor: "annotator".into(),
            target: slot(s),
            transform: mutmod_core::perception::Transform::Categorical { field: f.into() },
        })
        .collect();
    d
}

fn learning_round_trip() -> Outcome {
    // CPT recovery from a replayed trace of forward samples.
    let decls = annotated(AutonomyMode::Wizard);
    let engine = Engine::new(&decls, 0).map_err(|e| e.to_string())?;
    let net = engine.network().unwrap();
    let fields = [(SAW_GESTURE, "saw"), (UNDERSTOOD, "understood"), (GAZE, "gaze")];
    let timeline = net
        .sample_joint(FIT_SAMPLES, 77)
        .into_iter()
        .enumerate()
        .map(|(i, a)| TimelineEntry {
            t: 10 * (i as u64 + 1),
            input: Input::Event {
                sensor: "annotator".into(),
                payload: fields
                    .iter()
                    .map(|(s, f)| (f.to_string(), Scalar::Token(a[&slot(s)].clone())))
                    .collect(),
            },
        })
        .collect();
    let s = Scenario {
        name: "annotated".into(),
        declarations: decls.clone(),
        timeline,
        expectations: vec![],
    };
    let trace = run(&s, 0).unwrap();
    let log: Vec<Assignment> = trace.joint_assignments();
    ensure(log.len() == FIT_SAMPLES, || format!("{} assignments", log.len()))?;
    let domains = trace.domains();
    let mut worst = 0.0_f64;
    for truth in &decls.nodes {
        let fit = fit_cpt(&log, &truth.node, &truth.parents, FIT_ALPHA, &domains).map_err(|e| e.to_string())?;
        for (want, got) in truth.rows.iter().zip(&fit.rows) {
            ensure(want.given == got.given, || "row order differs".into())?;
            for (a, b) in want.p.iter().zip(&got.p) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= FIT_TOL, || format!("max row error {worst:.4}"))?;

    // Policy from a noisy human operator that mostly reacts to gaze.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let preferred = [
        ("hand", EXAGGERATE),
        ("object", "praise"),
        ("elsewhere", "call_attention"),
    ];
    let verbs = [EXAGGERATE, "praise", "call_attention", "repeat_word"];
    let mut timeline = Vec::new();
    let mut t = 0;
    for _ in 0..600 {
        t += 100;
        let saw = if rng.random_bool(0.7) { "yes" } else { "no" };
        let (gaze, verb) = preferred[rng.random_range(0..3)];
        timeline.push(TimelineEntry {
            t,
            input: Input::Event {
                sensor: "annotator".into(),
                payload: [
                    ("saw".to_string(), Scalar::Token(saw.into())),
                    ("gaze".to_string(), Scalar::Token(gaze.into())),
                ]
                .into(),
            },
        });
        t += 100;
        let verb = if rng.random_bool(0.7) {
            verb
        } else {
            verbs[rng.random_range(0..verbs.len())]
        };
        timeline.push(TimelineEntry {
            t,
            input: Input::Wizard {
                action: ActionTemplate::new(verb),
            },
        });
    }
    let s = Scenario {
        name: "operator".into(),
        declarations: annotated(AutonomyMode::Wizard),
        timeline,
        expectations: vec![],
    };
    let trace = run(&s, 0).unwrap();
    let records = trace.decision_records();
    let features = [slot(SAW_GESTURE), slot(GAZE)];
    let policy = learn_from_log(&records, &features, 1.0).map_err(|e| e.to_string())?;

    let mut seen: BTreeMap<Vec<String>, BTreeMap<String, usize>> = BTreeMap::new();
    for r in &records {
        let key: Vec<String> = features.iter().map(|f| r.context[&f.to_string()].clone()).collect();
        *seen.entry(key).or_default().entry(r.action.verb.clone()).or_default() += 1;
    }
    let mut tuples = 0;
    for (key, counts) in &seen {
        if counts.values().sum::<usize>() < POLICY_MIN_SUPPORT {
            continue;
        }
        let mut probe = Engine::new(&s.declarations, 0).unwrap();
        for (f, v) in features.iter().zip(key) {
            probe.commit_perceived(f, v, 1).unwrap();
        }
        let chosen = select_action_autonomous(&probe.snapshot(), &policy).map_err(|e| e.to_string())?;
        let chosen = chosen.map_or(NO_ACTION.to_string(), |a| a.verb);
        let want = majority(counts);
        ensure(chosen == want, || {
            format!("{key:?}: policy picks {chosen}, majority is {want}")
        })?;
        tuples += 1;
    }
    ensure(tuples > 0, || "no feature tuple reached the support threshold".into())?;
    Ok(format!(
        "fit_cpt max row error {worst:.4} on {FIT_SAMPLES} samples; policy matches majority on {tuples}/{tuples} tuples"
    ))
}

fn realtime_budget() -> Outcome {
    let s = load_scenario(scenarios_dir().join("pointing_large.mmd")).map_err(|e| e.to_string())?;
    ensure(s.declarations.nodes.len() == 12, || {
        "large scenario is not twelve nodes".into()
    })?;
    let (_, mut times) = run_timed(&s, 0).unwrap();
    times.sort();
    let median = times[times.len() / 2];
    let p99 = times[((times.len() as f64 * 0.99).ceil() as usize).min(times.len()) - 1];
    ensure(median <= MEDIAN_BUDGET && p99 <= P99_BUDGET, || {
        format!("median {median:?}, p99 {p99:?}")
    })?;
    Ok(format!("{} events: median {median:.2?}, p99 {p99:.2?}", times.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("pointing misunderstanding reproduction", pointing_reproduction),
        ("inference oracle equivalence", oracle_equivalence),
        ("sampler convergence", sampler_convergence),
        ("ordering property", ordering_property),
        ("replay determinism", replay_determinism),
        ("mode safety", mode_safety),
        ("learning round-trip", learning_round_trip),
        ("real-time budget", realtime_budget),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
