//! `savt`: sparse-attention ViT toolkit.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod accept;
mod analyze;
mod inputs;
mod model;
mod normalize;
mod probe;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use settings::UsageError;

#[derive(Parser, Debug)]
#[command(name = "savt", version, about = "Sparse-attention ViT toolkit: entmax-1.5 attention, feature analysis, probes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true, env = "SAVT_THREADS")]
    pub threads: Option<usize>,
    /// key=value file with defaults for seed, threads and model settings.
    #[arg(long, global = true, visible_alias = "config")]
    pub config_file: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Normalize rows of logits with softmax or entmax-1.5.
    Normalize(normalize::NormalizeArgs),
    /// Create models, run them, dump their features.
    #[command(subcommand)]
    Model(model::ModelCommand),
    /// Point-in-box, similarity maps, PCA renderings, attention support.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
    /// Linear probes on frozen features.
    #[command(subcommand)]
    Probe(probe::ProbeCommand),
    /// Run the acceptance suite.
    Accept(accept::AcceptArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = settings::Settings::resolve(&cli.global)?;
    if let Some(n) = settings.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Normalize(a) => normalize::run(&settings, a),
        Command::Model(c) => model::run(&settings, c),
        Command::Analyze(c) => analyze::run(&settings, c),
        Command::Probe(c) => probe::run(&settings, c),
        Command::Accept(a) => accept::run(&settings, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<accept::SuiteFailed>().is_some() => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
