mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ggam_core::Error;

#[derive(Parser, Debug)]
#[command(name = "ggam", version, about = "Grad-CAM guided channel-spatial attention on a synthetic fine-grained dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value configuration file. Flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory receiving every artifact of the run.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Run on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Master seed for model initialization and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Guidance loss multiplier.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// How many training samples to export as PPM images.
        #[arg(long, default_value_t = 8)]
        export: usize,
    },
    /// Train one model and save its checkpoint and per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file written by gen-data.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Accuracy and localization of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Export the Grad-CAM heatmap of one sample (PGM) and a side-by-side composite (PPM).
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Sample index within the split.
        #[arg(long)]
        index: usize,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Train all eight attention/guidance flag combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Comma-separated training seeds; each cell reports the median.
        #[arg(long, value_name = "LIST")]
        seeds: Option<String>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the full model once per guidance multiplier.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Comma-separated multipliers (default 1,2,...,9).
        #[arg(long, value_name = "LIST")]
        lambdas: Option<String>,
        #[arg(long, value_name = "LIST")]
        seeds: Option<String>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Run the gradient-check and oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit 1 for anything the caller can fix by changing the invocation.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Index { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
