//! `zsq`: build toy models, distill calibration data, calibrate, quantize
//! and evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zsq_core::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "zsq", version, about = "Zero-shot quantization toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Experiment config (TOML). Defaults to the built-in reference config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Seed override for the command's random draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the configured toy model and absorb BN statistics.
    BuildToy(commands::BuildToyArgs),
    /// Distill synthetic calibration batches from a model.
    Distill(commands::DistillArgs),
    /// Select clipping ranges for every weight and activation site.
    Calibrate(commands::CalibrateArgs),
    /// Write a quantized model from a calibration file.
    Quantize(commands::QuantizeArgs),
    /// Compare full-precision and quantized outputs on held-out data.
    Eval(commands::EvalArgs),
    /// Loss-mode by iteration-count sweep plus the Gaussian baseline.
    Ablation(commands::AblationArgs),
    /// Dump a distilled batch as PGM images.
    ExportImage(commands::ExportImageArgs),
    /// Per-batch PTQ versus ZSQ calibration agreement.
    Compare(commands::CompareArgs),
    /// Run build-toy, distill, calibrate, quantize and eval in one go.
    Run,
}

/// Exit code for a failure: 2 configuration, 3 data, 4 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Data) | None => 3,
        Some(ErrorClass::Numerical) => 4,
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ZSQ_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("ZSQ_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::InvalidConfig("ZSQ_THREADS must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::dispatch(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
