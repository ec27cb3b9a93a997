//! `glad`: dataset distillation in pixel space or in generator latent spaces.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "glad",
    version,
    about = "Dataset distillation with deep generative priors",
    after_help = config::key_listing()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Command {
    /// Generate the procedural glyph dataset.
    Gendata,
    /// Train expert networks and store their parameter trajectories.
    TrainExperts,
    /// Fit the generator to the training images (optional).
    PretrainGen,
    /// Distill a synthetic set.
    Distill,
    /// Train fresh networks on a synthetic set and report accuracy.
    Eval,
    /// Write image grids of a synthetic set and of the real data.
    Export,
    /// Aggregate evaluated runs into markdown tables.
    Report,
    /// Distill and evaluate once per latent space.
    SweepSpaces,
    /// Run the oracle equivalence checks.
    Selftest,
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let (head, overrides) = split_overrides(&raw);
    let cli = match Cli::try_parse_from(&head) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cfg = match config::RunConfig::from_args(&overrides).and_then(|c| Ok((c.resolve()?, c))) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("glad: config error: {e}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command, &cfg.0, &cfg.1) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(commands::Failure::Config(msg)) => {
            eprintln!("glad: config error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(msg)) => {
            eprintln!("glad: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Splits `argv` into the program and subcommand (with `--help` and
/// `--version`) and the config overrides that follow.
fn split_overrides(raw: &[String]) -> (Vec<String>, Vec<String>) {
    let mut head = vec![raw.first().cloned().unwrap_or_else(|| "glad".into())];
    let mut rest = Vec::new();
    let mut seen_command = false;
    for a in raw.iter().skip(1) {
        let is_meta = matches!(a.as_str(), "-h" | "--help" | "-V" | "--version" | "help");
        if !seen_command || is_meta {
            seen_command |= !a.starts_with('-');
            head.push(a.clone());
        } else {
            rest.push(a.clone());
        }
    }
    (head, rest)
}

