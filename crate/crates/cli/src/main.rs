//! `ficoco`: batch token reduction, FLOPs reports, workload synthesis and
//! trace rendering.

mod commands;
mod render;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Threads for the internal rayon pool; unset or 0 lets rayon decide.
const THREADS_VAR: &str = "FICOCO_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] ficoco::Error),
}

impl CliError {
    fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Engine(e) => e.class(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(ficoco::Error::Config(_) | ficoco::Error::Budget(_)) => 2,
            CliError::Engine(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ficoco", version, about = "Filter, correlate and compress visual tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the reduction pipeline on a workload.
    Reduce(ReduceArgs),
    /// Exact FLOPs accounting for one layer or a whole schedule.
    Flops(FlopsArgs),
    /// Write a synthetic workload directory.
    Synth(SynthArgs),
    /// Render a reduction trace as a grid or CSV.
    Trace(TraceArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    V,
    L,
}

impl From<VariantArg> for ficoco::Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::V => ficoco::Variant::V,
            VariantArg::L => ficoco::Variant::L,
        }
    }
}

/// Generator settings shared by `reduce` (when no workload is given) and `synth`.
#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Generator seed [default: the config seed for reduce, 0 for synth]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of text tokens
    #[arg(long, default_value_t = 32)]
    pub text: usize,
    /// Embedding width
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Attention heads per layer
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Leave out the CLS token
    #[arg(long)]
    pub no_cls: bool,
    /// Replace this many visual tokens by noisy copies of others
    #[arg(long, default_value_t = 0)]
    pub plant: usize,
    /// Noise level of the planted copies
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Seed for choosing planted tokens [default: generator seed + 1]
    #[arg(long)]
    pub plant_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    /// JSON config; defaults for --variant when omitted
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Variant to run when no config is given
    #[arg(long, value_enum, conflicts_with = "config")]
    pub variant: Option<VariantArg>,
    /// Workload directory or manifest; a synthetic one is generated otherwise
    #[arg(long)]
    pub workload: Option<std::path::PathBuf>,
    #[command(flatten)]
    pub gen: GenArgs,
    /// Directory for embeddings.npy, trace.json and summary.json
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    /// Also write the attention each reducing layer saw as a file-mode workload
    #[arg(long)]
    pub save_attention: Option<std::path::PathBuf>,
    /// Print the summary as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Inline JSON object or a path to one
    #[arg(long)]
    pub params: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 24)]
    pub grid_rows: usize,
    #[arg(long, default_value_t = 24)]
    pub grid_cols: usize,
    /// Number of layers to draw projection seeds for
    #[arg(long, default_value_t = 24)]
    pub layers: usize,
    #[command(flatten)]
    pub gen: GenArgs,
    /// Also write the attention of this layer over the initial tokens
    #[arg(long)]
    pub preview: Option<usize>,
    /// Variant used for --preview
    #[arg(long, value_enum, default_value = "v")]
    pub variant: VariantArg,
    /// Print the manifest as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Grid,
    Csv,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// trace.json written by reduce
    #[arg(long)]
    pub trace: std::path::PathBuf,
    #[arg(long, value_enum, default_value = "grid")]
    pub format: Format,
    /// Original index of a visual token to follow
    #[arg(long)]
    pub token: Option<usize>,
    /// Emit one JSON document instead of text
    #[arg(long)]
    pub json: bool,
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_VAR} must be a non-negative integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn fail(err: &CliError) -> ExitCode {
    let doc = json!({ "error": { "class": err.class(), "message": err.to_string() } });
    eprintln!("{doc}");
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.render().to_string().trim_end().to_string())),
    };
    if let Err(e) = init_threads() {
        return fail(&e);
    }
    let result = match cli.command {
        Command::Reduce(args) => commands::reduce(&args),
        Command::Flops(args) => commands::flops(&args),
        Command::Synth(args) => commands::synth(&args),
        Command::Trace(args) => commands::trace(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
