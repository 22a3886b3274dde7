//! `hma`: train, run and analyze HMA super-resolution models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// `print!` counterpart of [`say!`].
macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "hma", version, about = "Hybrid multi-axis aggregation super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a folder of high-resolution images.
    Train(TrainArgs),
    /// Super-resolve one image.
    Upscale(UpscaleArgs),
    /// Degrade, restore and score every image of a folder.
    Eval(EvalArgs),
    /// Bicubic downscaling of one image.
    Degrade(DegradeArgs),
    /// Parameter and multiply-add counts of a configuration.
    Count(CountArgs),
    /// Linear CKA between layer activations.
    Cka(CkaArgs),
    /// Seed a model for a new configuration from a checkpoint.
    Transfer(TransferArgs),
    /// Write synthetic texture images.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Architecture JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint to write; the loss trace goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "toy", value_parser = ["pretrain", "finetune", "toy"])]
    preset: String,
    /// Seeds both initialization and sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transfer matching parameters from this checkpoint before training.
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    /// Override the preset's iteration count (milestones beyond it are dropped).
    #[arg(long)]
    iters: Option<u64>,
    /// Loss-trace CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct UpscaleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 64)]
    tile: usize,
    #[arg(long, default_value_t = 8)]
    overlap: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model to evaluate; omit with `--bicubic`.
    #[arg(long, required_unless_present = "bicubic")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    hr_dir: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    report: PathBuf,
    /// Score plain bicubic upscaling instead of a model.
    #[arg(long)]
    bicubic: bool,
    #[arg(long, default_value_t = 64)]
    tile: usize,
    #[arg(long, default_value_t = 8)]
    overlap: usize,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    config: PathBuf,
    /// Low-resolution input side.
    #[arg(long, default_value_t = 64)]
    input_size: usize,
}

#[derive(Args, Debug)]
struct CkaArgs {
    #[arg(long)]
    ckpt_a: PathBuf,
    /// Second model; without it the report compares layers of the first.
    #[arg(long)]
    ckpt_b: Option<PathBuf>,
    #[arg(long)]
    probe_dir: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Comma-separated row layers (default: grid interaction features, or
    /// block outputs when comparing two models).
    #[arg(long, value_delimiter = ',')]
    rows: Option<Vec<String>>,
    /// Comma-separated column layers (default: grid queries, or the rows).
    #[arg(long, value_delimiter = ',')]
    cols: Option<Vec<String>>,
    /// Low-resolution probe patch side.
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 2)]
    per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    to_config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seeds the parameters that are not copied.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<hma_core::Error> for Failure {
    fn from(e: hma_core::Error) -> Self {
        let code = match e {
            hma_core::Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("HMA_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("HMA_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Upscale(a) => commands::upscale(a),
        Command::Eval(a) => commands::eval(a),
        Command::Degrade(a) => commands::degrade(a),
        Command::Count(a) => commands::count(a),
        Command::Cka(a) => commands::cka(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::Synth(a) => commands::synth(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
