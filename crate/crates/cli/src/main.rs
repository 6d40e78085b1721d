mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train an evolving cross-user memory pool and evaluate memory-augmented
/// LLM re-ranking.
#[derive(Parser, Debug)]
#[command(name = "amem4rec", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON run configuration; flags given here override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderArg>,

    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// Worker threads for ranking; defaults to one per core.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Interaction file in canonical JSONL, overriding the configured dataset.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Mock,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FormatArg {
    Jsonl,
    MindTsv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum VariantArg {
    Full,
    NoSimilarityValidator,
    NoSemanticValidator,
    NoEvolution,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a raw dataset to canonical JSONL.
    Ingest {
        #[arg(long, value_enum)]
        format: FormatArg,
        /// Input file for the jsonl format.
        #[arg(long, required_if_eq("format", "jsonl"))]
        input: Option<PathBuf>,
        #[arg(long, required_if_eq("format", "mind_tsv"))]
        behaviors: Option<PathBuf>,
        #[arg(long, required_if_eq("format", "mind_tsv"))]
        news: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build the memory pool from the training cohort.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, value_enum)]
        ablation: Option<VariantArg>,
        /// Stop after this many users, leaving a checkpoint to resume from.
        #[arg(long, hide = true)]
        stop_after_users: Option<usize>,
    },
    /// Rank held-out items and report NDCG.
    Eval {
        /// Pool file; defaults to pool.jsonl in the output directory.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Rank without any memories.
        #[arg(long)]
        no_memory: bool,
        /// Evaluate users with 2 or 3 interactions instead of the cohort.
        #[arg(long)]
        cold_start: bool,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        ablation: Option<VariantArg>,
        /// Report path; defaults to metrics.json in the output directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant on the same cohort.
    Ablate {
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Option<Vec<VariantArg>>,
    },
    /// Look inside a pool file.
    Inspect {
        #[arg(long)]
        pool: Option<PathBuf>,
        #[command(subcommand)]
        what: InspectCommand,
    },
}

#[derive(Subcommand, Debug)]
pub enum InspectCommand {
    /// Size and evolution-count histogram.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// One entry in full.
    Show { id: u64 },
    /// Embeddings as TSV for external projection tools.
    ExportEmbeddings { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
