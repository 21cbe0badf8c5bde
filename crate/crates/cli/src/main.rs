//! `sniffer`: ingest datasets, build instruction data, detect out-of-context
//! image use, and evaluate results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use sniffer_core::pipeline::{ComposeMode, EntitySource};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sniffer", version, about = "Detect out-of-context image misuse in news claims")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. They override the config file.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Claims file (JSON Lines).
    #[arg(long, global = true)]
    pub claims: Option<PathBuf>,
    /// Evidence file (JSON Lines).
    #[arg(long, global = true)]
    pub evidence: Option<PathBuf>,
    /// Gold explanations file (JSON Lines).
    #[arg(long, global = true)]
    pub golds: Option<PathBuf>,
    /// Falsified pairs for stage-2 instruction generation (JSON Lines).
    #[arg(long, global = true)]
    pub fakes: Option<PathBuf>,
    /// Results file to evaluate.
    #[arg(long, global = true)]
    pub results: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// stored | live | none
    #[arg(long, global = true)]
    pub entity_source: Option<EntitySource>,
    /// model | shortcut
    #[arg(long, global = true)]
    pub compose_mode: Option<ComposeMode>,
    #[arg(long, global = true)]
    pub max_pages: Option<usize>,
    /// Evaluate on a seeded subset; repeat for several fractions.
    #[arg(long, global = true, action = ArgAction::Append)]
    pub subset_fraction: Vec<f64>,
    /// Exit 0 even when some claims failed.
    #[arg(long, global = true)]
    pub keep_going: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate claims and evidence files and print counts.
    Ingest,
    /// Build instruction-tuning records.
    BuildInstructions {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Run detection over the claims.
    Detect {
        /// Detect one claim and print its explanation.
        #[arg(long)]
        claim_id: Option<String>,
    },
    /// Compute accuracy and explanation metrics for a results file.
    Evaluate,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.flags.config {
        Some(path) => RunConfig::load(path).map_err(commands::invalid)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.flags);
    match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::BuildInstructions { stage } => commands::build_instructions(&cfg, stage),
        Command::Detect { claim_id } => commands::detect(&cfg, claim_id.as_deref()),
        Command::Evaluate => commands::evaluate(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
