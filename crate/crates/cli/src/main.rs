mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;

/// Patch curation, context-aware classification and slide segmentation.
#[derive(Parser, Debug)]
#[command(name = "spider", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Pipeline config file (TOML); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (split, init, shuffling, dropout).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages; default is all logical cores.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Machine-readable JSON on stdout instead of text tables.
    #[arg(long, global = true)]
    pub json: bool,
    /// Debug logging on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Grid-tile slides and mark tissue/background; optionally derive seeds from masks.
    Tile(commands::TileArgs),
    /// Embed tissue, seed and context patches into the embedding cache.
    Embed(commands::EmbedArgs),
    /// Build an exact vector index from cached embeddings.
    Index(commands::IndexArgs),
    /// Retrieve one candidate queue per seed class.
    Retrieve(commands::RetrieveArgs),
    /// Run the verification HTTP service.
    Serve(commands::ServeArgs),
    /// Compile accepted decisions into a dataset manifest.
    Compile(commands::CompileArgs),
    /// Assign whole slides to train/test.
    Split(commands::SplitArgs),
    /// Per-class patch and slide counts of a manifest.
    Stats(commands::StatsArgs),
    /// Train the context-aware classification head.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(commands::EvalArgs),
    /// Retrain and evaluate at several context sizes.
    Ablate(commands::AblateArgs),
    /// Classify every tissue cell of a slide and render an overlay.
    Segment(commands::SegmentArgs),
}

fn init_logging(verbose: bool) {
    let level = if verbose {
        tracing::Level::DEBUG
    } else {
        tracing::Level::WARN
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
