//! `spect-rise`: phantom synthesis, projection, MLEM and ensemble
//! reconstruction with hotspot confidence reports.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "spect-rise", version, about = "Ensemble reconstruction and hotspot confidence for 2D emission tomography")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Flags and `SPECT_RISE_*` variables
/// override values from the configuration file.
#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "SPECT_RISE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Top-level random seed.
    #[arg(long, global = true, env = "SPECT_RISE_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SPECT_RISE_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Target-to-background ratio such as 4:1; a comma-separated list for `sweep`.
    #[arg(long, global = true, env = "SPECT_RISE_TB")]
    pub tb: Option<String>,
    /// Expected total counts of the noisy sinogram.
    #[arg(long, global = true, env = "SPECT_RISE_COUNTS")]
    pub counts: Option<f64>,
    /// Members per ensemble.
    #[arg(long, global = true, env = "SPECT_RISE_ENSEMBLE_SIZE", value_parser = clap::value_parser!(u64).range(1..))]
    pub ensemble_size: Option<u64>,
    /// Sampling stages per ensemble.
    #[arg(long, global = true, env = "SPECT_RISE_STAGES", value_parser = clap::value_parser!(u64).range(1..))]
    pub stages: Option<u64>,
    /// Half-width of the position ROI in standard deviations.
    #[arg(long, global = true, env = "SPECT_RISE_K_SIGMA")]
    pub k_sigma: Option<f64>,
    /// Histogram bins per PDF.
    #[arg(long, global = true, env = "SPECT_RISE_BINS", value_parser = clap::value_parser!(u64).range(2..))]
    pub bins: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the phantom description and its truth image.
    Phantom,
    /// Project the phantom and add Poisson noise.
    Project,
    /// MLEM reconstruction of a sinogram.
    Mlem {
        #[arg(long)]
        sinogram: PathBuf,
    },
    /// Ensemble sampling, inference and detection.
    Rise {
        #[command(subcommand)]
        command: RiseCommand,
    },
    /// Full pipeline over several T:B ratios and replicate seeds.
    Sweep {
        /// Replicate seeds per ratio.
        #[arg(long)]
        replicates: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
pub enum RiseCommand {
    /// Sample a weighted ensemble for a sinogram.
    Sample {
        #[arg(long)]
        sinogram: PathBuf,
        /// Prior configuration (JSON). Without it, priors are derived from
        /// an MLEM reconstruction and refined block by block.
        #[arg(long)]
        priors: Option<PathBuf>,
        /// Hotspot left free in the final ensemble when priors are derived.
        #[arg(long)]
        target: Option<String>,
    },
    /// Marginal PDFs, summaries, scatter tables and the RISE image.
    Infer {
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// Hotspot ROI selection, activity PDFs and confidence.
    Detect {
        #[arg(long)]
        ensemble: PathBuf,
        /// Hotspot labels (default: every hotspot with a free parameter).
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
}

/// Error categories printed as the `error` field of the failure line.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Input(String),
    Runtime(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Input(_) => "input",
            Failure::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Runtime(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Input(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<rise_core::Error> for Failure {
    fn from(e: rise_core::Error) -> Self {
        use rise_core::Error as E;
        match e {
            E::InvalidInput(_) | E::Degenerate(_) => Failure::Usage(e.to_string()),
            E::Io(_) | E::Parse(_) | E::Json(_) | E::ShapeMismatch(_) => Failure::Input(e.to_string()),
            E::EmptyRoi(_) => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<rise_core::Error>() {
            Ok(core) => core.into(),
            Err(e) => Failure::Input(format!("{e:#}")),
        }
    }
}

fn fail(f: &Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind(), "message": f.message().replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(f.code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return fail(&Failure::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}
