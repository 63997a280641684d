//! `frames`: run the framing-analysis pipeline stage by stage.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "frames",
    version,
    about = "Compare machine and human news-frame labels"
)]
pub struct Cli {
    /// Config file (default: ./frames.toml when present).
    #[arg(long, global = true, env = "FRAMES_CONFIG")]
    pub config: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub show_config: bool,

    /// Timestamp stamped on new records: RFC 3339 or Unix seconds.
    /// Falls back to SOURCE_DATE_EPOCH, then the system clock.
    #[arg(long, global = true)]
    pub now: Option<String>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a CSV/JSONL/JSON corpus and write the canonical corpus store.
    Ingest(IngestArgs),
    /// Per-program item counts and word-count summaries.
    Stats(StatsArgs),
    /// Translate corpus items through the configured provider.
    Translate(TranslateArgs),
    /// Classify items into the predominant frame.
    Classify(ClassifyArgs),
    /// Partition items into annotation batches.
    Batches(BatchesArgs),
    /// Serve the annotation API and UI assets.
    Serve(ServeArgs),
    /// Join annotations with classifications and write agreement reports.
    Analyze(AnalyzeArgs),
    /// Dump the latest annotations and classifications as flat tables.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// jsonl, json or csv (default: from the input extension).
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Also summarize translated word counts from this store.
    #[arg(long)]
    pub translations: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// http_mt, passthrough or scripted.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Drop cached translations for these items and translate again.
    #[arg(long)]
    pub force: bool,
    /// Where to write per-item failures (default: <out>.failures.jsonl).
    #[arg(long)]
    pub failures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Prompt template override (TOML).
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Frame definitions override (JSONL of {frame, definition_text}).
    #[arg(long)]
    pub definitions: Option<PathBuf>,
    /// Comma-separated frame order, e.g. "conflict,economic,...".
    #[arg(long, value_delimiter = ',')]
    pub frame_order: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Translation store; its text is classified instead of the original
    /// when an item has a translation. Defaults to the configured store
    /// when that file exists.
    #[arg(long)]
    pub translations: Option<PathBuf>,
    /// Classify original texts even when translations exist.
    #[arg(long, conflicts_with = "translations")]
    pub originals: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// http_llm, scripted or lexicon.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_alternatives: Option<usize>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Requests per second across all workers.
    #[arg(long)]
    pub rate_limit: Option<f64>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long)]
    pub failures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BatchesArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_batch: Option<usize>,
    #[arg(long)]
    pub n_batches: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub translations: Option<PathBuf>,
    #[arg(long)]
    pub batches: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Directory of built UI assets.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[command(flatten)]
    pub prompt: PromptArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub classifications: Option<PathBuf>,
    /// Corpus used for word counts missing from annotations.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv or json.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub bin_width: Option<usize>,
    #[arg(long)]
    pub cap: Option<usize>,
    /// Rescale frame masses to sum to one before the probability report.
    #[arg(long)]
    pub renormalize: bool,
    /// Only use classifications from this model.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub frame_order: Option<Vec<String>>,
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub classifications: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv or json.
    #[arg(long)]
    pub format: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("FRAMES_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    ExitCode::from(commands::run(cli))
}
