//! `tisa`: Toeplitz analysis of position embeddings, kernel fitting and toy
//! model training.
//!
//! Exit codes: 0 success, 2 bad input, 3 output could not be written,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tisa::model::{PositionMode, Scheme, TokenSampling};

mod commands;
mod failure;
mod table;

#[derive(Parser)]
#[command(name = "tisa", version, about = "Translation-invariant positional scoring tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure how Toeplitz the position-embedding similarity matrix is.
    Analyze(AnalyzeArgs),
    /// Extract the average positional score matrix of one attention head.
    Extract(ExtractArgs),
    /// Fit radial-basis kernels to an offset profile.
    Fit(FitArgs),
    /// Train the toy encoder on a synthetic task.
    Train(TrainArgs),
    /// Count positional parameters of an architecture.
    CountParams(CountArgs),
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Position embeddings as a matrix file, one row per position.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Heatmap CSV (i,j,value).
    #[arg(long)]
    pub out: PathBuf,
    /// Row-normalize before taking inner products.
    #[arg(long)]
    pub cosine: bool,
    /// Also write the diagonal-mean profile (offset,value).
    #[arg(long)]
    pub profile_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Score matrix file; a directory when `--all` is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Extract every head in the bundle.
    #[arg(long)]
    pub all: bool,
    /// Worker threads for `--all`.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Rows whose diagonal-centered sections are exported.
    #[arg(long, value_delimiter = ',')]
    pub sections: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub half_width: usize,
    /// Sections CSV (row,offset,value); defaults to `<out>.sections.csv`.
    #[arg(long)]
    pub sections_out: Option<PathBuf>,
    /// Diagonal-mean profile CSV, the input format of `fit`.
    #[arg(long)]
    pub profile_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FitArgs {
    /// CSV of offset,value pairs over contiguous offsets.
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub kernels: usize,
    /// Half-width of the fitted range around the profile's middle offset.
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    /// Grow the kernel count one at a time, warm-starting each size.
    #[arg(long)]
    pub ladder: bool,
    /// Worker threads for restarts. Output does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Head width recorded in the kernel file.
    #[arg(long, default_value_t = 64)]
    pub d_k: usize,
    /// Kernel JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Fitted samples CSV (offset,target,fitted); defaults to `<out>.samples.csv`.
    #[arg(long)]
    pub samples_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// shift_copy or distance_class.
    #[arg(long, default_value = "shift_copy")]
    pub task: String,
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub offset: i64,
    /// Largest marker distance labeled "near" for distance_class.
    #[arg(long, default_value_t = 3)]
    pub max_distance: usize,
    #[arg(long, default_value = "case_b_tisa_only", value_parser = |s: &str| s.parse::<PositionMode>())]
    pub mode: PositionMode,
    #[arg(long, default_value_t = 3)]
    pub kernels: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    /// Training sequence length.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub d_k: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Evaluation length; defaults to the training length.
    #[arg(long)]
    pub eval_len: Option<usize>,
    /// permutation or iid.
    #[arg(long, default_value = "permutation")]
    pub sampling: String,
    /// Keep position embeddings at their initial values.
    #[arg(long)]
    pub freeze_pe: bool,
    /// Checkpoint directory; also receives report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CountArgs {
    #[arg(long, value_parser = |s: &str| s.parse::<Scheme>())]
    pub scheme: Scheme,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub d: u64,
    #[arg(long = "S", value_parser = clap::value_parser!(u64).range(1..))]
    pub s: u64,
    #[arg(long = "H", value_parser = clap::value_parser!(u64).range(1..))]
    pub h: u64,
    #[arg(long = "L", value_parser = clap::value_parser!(u64).range(1..))]
    pub l: u64,
}

pub fn parse_sampling(s: &str) -> Result<TokenSampling, failure::Failure> {
    match s {
        "permutation" => Ok(TokenSampling::Permutation),
        "iid" => Ok(TokenSampling::Iid),
        other => Err(failure::Failure::input(format!("unknown sampling {other:?}"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Train(a) => commands::train(&a),
        Command::CountParams(a) => commands::count_params(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
