//! `toolgate`: evaluate and control tool-calling decisions from recorded traces.
//!
//! Exit status: 0 on success, 1 when the trace has validation findings,
//! 2 on usage or runtime errors.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use commands::Findings;
use config::{Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "toolgate", version, about, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Check a trace file and list every violated invariant.
    Validate,
    /// Per-instance need/utility/gain labels and bucket transitions.
    Label,
    /// Perceived against true need and utility.
    Align,
    /// Gain and NDCG of oracle, self and estimator selections under a budget.
    Afford,
    /// Train an estimator bundle from hidden-state embeddings.
    Train,
    /// Score decision policies on a trace.
    Simulate,
    /// Run the budget-enforcing decision service.
    Serve,
    /// All trace analyses in one output directory.
    Report,
    /// Write a generated trace (and embeddings) from a preset.
    Synth,
}

fn run(command: Command, cfg: &RunConfig) -> anyhow::Result<()> {
    match command {
        Command::Validate => commands::validate_cmd(cfg),
        Command::Label => commands::label_cmd(cfg),
        Command::Align => commands::align_cmd(cfg),
        Command::Afford => commands::afford_cmd(cfg),
        Command::Train => commands::train_cmd(cfg),
        Command::Simulate => commands::simulate_cmd(cfg),
        Command::Serve => commands::serve_cmd(cfg),
        Command::Report => commands::report_cmd(cfg),
        Command::Synth => commands::synth_cmd(cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();

    let result = RunConfig::resolve(cli.flags).and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Findings>() {
            Some(f) => {
                for line in &f.0 {
                    println!("{line}");
                }
                eprintln!("{e}");
                ExitCode::from(1)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
    }
}
