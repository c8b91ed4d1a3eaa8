use std::path::Path;

use mutmod_core::decision::learn_from_log;
use mutmod_core::harness::{self, export_trace, import_trace, load_scenario, Scenario, Trace};
use mutmod_core::{fit_cpt as fit, AutonomyMode, SlotKey};
use mutmod_server::{resolve_port, serve, ServerConfig, PORT_ENV};

pub enum Failure {
    /// At least one expectation failed.
    Expectations,
    /// Unreadable or invalid input.
    Invalid(String),
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn load(path: &Path, mode: Option<AutonomyMode>) -> Result<Scenario, Failure> {
    let mut s = load_scenario(path).map_err(invalid)?;
    if let Some(m) = mode {
        s.declarations.mode = m;
    }
    Ok(s)
}

fn report(trace: &Trace, scenario: &Scenario) -> Result<(), Failure> {
    let r = harness::check(trace, &scenario.expectations);
    println!("{r}");
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Expectations)
    }
}

pub fn run(
    path: &Path,
    seed: u64,
    mode: Option<AutonomyMode>,
    trace_out: Option<&Path>,
    serve_flag: Option<u16>,
) -> Result<(), Failure> {
    let scenario = load(path, mode)?;
    let env = std::env::var(PORT_ENV).ok();
    let port = resolve_port(serve_flag, env.as_deref()).map_err(invalid)?;
    let trace = match port {
        None => harness::run(&scenario, seed).map_err(invalid)?,
        Some(port) => serve_until_interrupted(&scenario, seed, port)?,
    };
    if let Some(out) = trace_out {
        export_trace(&trace, out).map_err(invalid)?;
    }
    println!("digest {}", trace.digest());
    report(&trace, &scenario)
}

fn serve_until_interrupted(scenario: &Scenario, seed: u64, port: u16) -> Result<Trace, Failure> {
    let rt = tokio::runtime::Runtime::new().map_err(invalid)?;
    rt.block_on(async {
        let handle = serve(scenario, seed, ServerConfig::on_port(port))
            .await
            .map_err(invalid)?;
        eprintln!("serving on ws://{}", handle.local_addr());
        tokio::signal::ctrl_c().await.map_err(invalid)?;
        Ok(handle.shutdown().await)
    })
}

pub fn check(trace: &Path, scenario: &Path) -> Result<(), Failure> {
    let t = import_trace(trace).map_err(invalid)?;
    let s = load(scenario, None)?;
    report(&t, &s)
}

pub fn fit_cpt(trace: &Path, node: &SlotKey, parents: &[SlotKey], alpha: f64) -> Result<(), Failure> {
    let t = import_trace(trace).map_err(invalid)?;
    // states from before the node or a parent was first observed
    let (log, partial): (Vec<_>, Vec<_>) = t
        .joint_assignments()
        .into_iter()
        .partition(|a| a.contains_key(node) && parents.iter().all(|p| a.contains_key(p)));
    if !partial.is_empty() {
        eprintln!("skipped {} states missing the node or a parent", partial.len());
    }
    let cpt = fit(&log, node, parents, alpha, &t.domains()).map_err(invalid)?;
    println!("{}", serde_json::to_string_pretty(&cpt).map_err(invalid)?);
    Ok(())
}

pub fn learn_policy(trace: &Path, features: &[SlotKey], alpha: f64) -> Result<(), Failure> {
    let t = import_trace(trace).map_err(invalid)?;
    let policy = learn_from_log(&t.decision_records(), features, alpha).map_err(invalid)?;
    if policy.skipped > 0 {
        eprintln!("skipped {} decisions with missing feature values", policy.skipped);
    }
    println!("{}", serde_json::to_string_pretty(&policy).map_err(invalid)?);
    Ok(())
}
