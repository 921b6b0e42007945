//! The `lcae` command-line tool.
//!
//! Every subcommand is a plain function writing to caller-supplied streams, so
//! tests drive the tool in-process through [`run`].

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lcae_core::Error;

mod commands;
pub use commands::{default_thresholds, format_raw, median, parse_raw, quantize_weight, sweep_table, SweepRow, SWEEP_BASE_CHANNELS, SWEEP_EPOCHS};
pub mod config;

/// Exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    /// Any failure not covered below (bad data, incompatible checkpoint, …).
    pub const FAILURE: i32 = 1;
    /// Bad flags or an invalid configuration.
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    /// Training diverged.
    pub const NUMERICAL: i32 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::io("<stream>", e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => exit::USAGE,
            CliError::Core(e) if e.is_io() => exit::IO,
            CliError::Core(e) if e.is_numerical() => exit::NUMERICAL,
            CliError::Core(_) => exit::FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lcae", version, about = "Infrared small target detection with local contrast attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Local-contrast operator overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct LcaFlags {
    /// Centre tap weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Neighbour tap weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Neighbour offset in pixels.
    #[arg(long)]
    pub dilation: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// TOML settings file; explicit flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the local-contrast attention map of an image.
    Attend {
        input: PathBuf,
        /// 8-bit PNG of the weights scaled to 0–255.
        #[arg(long)]
        out: PathBuf,
        /// Text file with the full-precision weights.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Feed 0–255 intensities instead of the standardised image.
        #[arg(long)]
        raw_intensity: bool,
        #[command(flatten)]
        lca: LcaFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Total number of samples.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// How many of them go to the test split (default: one in five).
        #[arg(long)]
        test_count: Option<usize>,
        /// Exact number of targets per image.
        #[arg(long)]
        targets: Option<usize>,
        /// Square image side.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a network on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        lca: LcaFlags,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Square network input side (default: inferred from the data).
        #[arg(long)]
        input_size: Option<usize>,
        /// Start from the parameters in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Replace the attention map by ones.
        #[arg(long)]
        no_lce: bool,
    },
    /// Metrics of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// (Fa, Pd) pairs over a list of thresholds.
    Roc {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated thresholds (default 0, 0.05, …, 1).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of (d, α, β), or the attention ablation.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        dilation: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        alpha: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        beta: Option<Vec<f64>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        base_channels: Option<usize>,
        /// Use the full training budget instead of the quick one.
        #[arg(long)]
        full: bool,
        /// Compare attention on/off instead of sweeping the grid.
        #[arg(long)]
        ablation: bool,
        /// Number of seeds for the ablation.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parameter count, FLOPs and throughput.
    Bench {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        lca: LcaFlags,
        /// Square input side.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Minimum duration of the timed loop.
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
    },
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit status. Diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let rendered = e.render().to_string();
            let _ = if code == exit::OK { out.write_all(rendered.as_bytes()) } else { err.write_all(rendered.as_bytes()) };
            return code;
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(err, "lcae: {e}");
            e.exit_code()
        }
    }
}
