use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::Failure;
use mutmod_core::{AutonomyMode, SlotKey};

/// Scenario runner for the mutual-modelling engine.
///
/// Exit status: 0 when every expectation holds, 1 when one fails, 2 when a
/// file cannot be loaded or is invalid.
#[derive(Debug, Parser)]
#[command(name = "mutmod", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Replay a scenario and check its expectations.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the scenario's autonomy mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AutonomyMode>,
        /// Write the trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Serve the run over WebSocket on this port (0 picks one) until
        /// interrupted. Falls back to MUTMOD_PORT.
        #[arg(long)]
        serve: Option<u16>,
    },
    /// Check a recorded trace against a scenario's expectations.
    Check { trace: PathBuf, scenario: PathBuf },
    /// Fit one node's table from the joint assignments in a trace.
    FitCpt {
        trace: PathBuf,
        #[arg(long, value_parser = parse_slot)]
        node: SlotKey,
        #[arg(long, value_parser = parse_slot, value_delimiter = ',')]
        parents: Vec<SlotKey>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Learn an action policy from the human decisions in a trace.
    LearnPolicy {
        trace: PathBuf,
        #[arg(long, value_parser = parse_slot, value_delimiter = ',', required = true)]
        features: Vec<SlotKey>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
}

fn parse_mode(s: &str) -> Result<AutonomyMode, String> {
    s.parse()
        .map_err(|_| format!("expected wizard, mixed or autonomous, got {s:?}"))
}

fn parse_slot(s: &str) -> Result<SlotKey, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Cmd::Run {
            scenario,
            seed,
            mode,
            trace,
            serve,
        } => commands::run(&scenario, seed, mode, trace.as_deref(), serve),
        Cmd::Check { trace, scenario } => commands::check(&trace, &scenario),
        Cmd::FitCpt {
            trace,
            node,
            parents,
            alpha,
        } => commands::fit_cpt(&trace, &node, &parents, alpha),
        Cmd::LearnPolicy { trace, features, alpha } => commands::learn_policy(&trace, &features, alpha),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Expectations) => ExitCode::from(1),
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
