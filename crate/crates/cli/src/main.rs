//! `grdh`: synthesize data, run the three training phases, hide and reveal
//! messages, and evaluate.
//!
//! Exit status: 0 success, 2 invalid configuration or arguments, 3 missing
//! checkpoint, 4 message exceeds capacity, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "grdh", version, about = "Generative reversible data hiding")]
struct Cli {
    /// Experiment configuration (TOML). Defaults describe the toy pipeline.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true, env = "GRDH_OUT")]
    out: Option<PathBuf>,

    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the two synthetic image domains as PNG folders.
    SynthData,
    /// Phase 1: translator G1, restorer F and their discriminators.
    TrainTranslator(TrainArgs),
    /// Phase 2: cover generator G2 and its discriminator.
    TrainGenerator(TrainArgs),
    /// Phase 3: extractor E; also writes the receiver key directory.
    TrainExtractor(TrainArgs),
    /// Hide a message in a generated, translated image.
    Hide(HideArgs),
    /// Extract the message and/or restore the cover from a marked image.
    Reveal(RevealArgs),
    /// Bit accuracy and restoration PSNR over random messages.
    Evaluate(EvalArgs),
    /// Accuracy for each group size k.
    SweepK(EvalArgs),
    /// Accuracy for each interval gap delta.
    SweepDelta(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training steps; overrides the phase's `steps`.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct CodecArgs {
    /// Group size; overrides `codec.k`.
    #[arg(long)]
    pub k: Option<u32>,
    /// Interval gap; overrides `codec.delta`.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct HideArgs {
    /// Message as hexadecimal bytes.
    #[arg(long, conflicts_with = "message_file")]
    pub message_hex: Option<String>,
    /// Message as the raw bytes of a file.
    #[arg(long)]
    pub message_file: Option<PathBuf>,
    /// Keep only the first this many message bits.
    #[arg(long)]
    pub message_bits: Option<usize>,
    #[command(flatten)]
    pub codec: CodecArgs,
}

#[derive(Args, Debug, Clone)]
pub struct RevealArgs {
    /// Marked image; defaults to the last `hide` output.
    #[arg(long)]
    pub marked: Option<PathBuf>,
    /// Key directory; defaults to `<out>/keys`.
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// Message length in bits (shared out of band); defaults to capacity.
    #[arg(long)]
    pub message_bits: Option<usize>,
    /// Only extract the message; the restorer is never loaded.
    #[arg(long, conflicts_with = "restore_only")]
    pub extract_only: bool,
    /// Only restore the cover; the extractor is never loaded.
    #[arg(long)]
    pub restore_only: bool,
    /// Replace the extractor by the noise recorded next to the marked image.
    #[arg(long)]
    pub oracle_extractor: bool,
    #[command(flatten)]
    pub codec: CodecArgs,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Messages per evaluation cell; overrides `evaluate.n_messages`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Skip the 8-bit quantization of marked images.
    #[arg(long)]
    pub float_path: bool,
    /// Replace the extractor by the true noise of each trial.
    #[arg(long)]
    pub oracle_extractor: bool,
    #[command(flatten)]
    pub codec: CodecArgs,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<grdh::Error>() {
        Some(grdh::Error::Config(_) | grdh::Error::Parameter(_)) => 2,
        Some(grdh::Error::MissingCheckpoint(_)) => 3,
        Some(grdh::Error::Capacity { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
