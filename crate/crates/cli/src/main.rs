//! `nast`: the command-line entry point of the toolkit.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error. Runtime errors are
//! reported on stderr as a single line `error: category=<category>: <message>`.
//! `NAST_LOG` sets log verbosity (`error`, `warn`, `info`, `debug`).

mod run;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "nast", version, about = "Noise-aware discrete speech tokenizer toolkit")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugmentArg {
    Identity,
    FeatureNoise,
    FeatureWarp,
    TimeStretch,
    PitchShift,
    Noise,
    Reverb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    FeatureNoise,
    FeatureWarp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    Local,
    Global,
    Both,
}

/// Which quantizer a command tokenizes with.
#[derive(Debug, Args)]
#[group(required = false, multiple = false)]
pub struct QuantizerArgs {
    /// NAST checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// k-means model written by `nast kmeans --fit`.
    #[arg(long)]
    pub kmeans: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic feature corpus.
    Synth {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_utterances: Option<usize>,
        #[arg(long)]
        noise_scale: Option<f64>,
    },
    /// Augment features of a manifest, or a single WAV file.
    Augment {
        #[arg(long, value_enum)]
        kind: AugmentArg,
        /// Lower end of the parameter range (rate, scale, SNR in dB, or semitones).
        #[arg(long)]
        lo: Option<f64>,
        /// Upper end of the parameter range; defaults to `lo`.
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long, required_unless_present = "wav")]
        manifest: Option<PathBuf>,
        /// Output directory (manifest mode) or output WAV path (WAV mode).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "manifest")]
        wav: Option<PathBuf>,
        /// Directory of noise WAV files for `noise`.
        #[arg(long)]
        noise_dir: Option<PathBuf>,
        /// Room impulse response WAV for `reverb`.
        #[arg(long)]
        rir: Option<PathBuf>,
    },
    /// Train a NAST model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the desk preset instead of plain defaults.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        units: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        /// Run utterance gradients on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Write the unit file of a corpus.
    Tokenize {
        #[command(flatten)]
        quantizer: QuantizerArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a k-means baseline or assign units with one.
    Kmeans {
        #[arg(long, conflicts_with = "assign", required_unless_present = "assign")]
        fit: bool,
        #[arg(long)]
        assign: bool,
        #[arg(long)]
        manifest: PathBuf,
        /// Model path: written by --fit, read by --assign.
        #[arg(long)]
        model: PathBuf,
        /// Unit file written by --assign.
        #[arg(long, required_if_eq("assign", "true"))]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Unit edit distance between clean and augmented tokenizations.
    EvalUed {
        #[arg(long, requires = "units_aug")]
        units_clean: Option<PathBuf>,
        #[arg(long, requires = "units_clean")]
        units_aug: Option<PathBuf>,
        #[command(flatten)]
        quantizer: QuantizerArgs,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "feature-noise")]
        kind: AugmentArg,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Speaker probe on local (unit histogram) and global representations.
    Probe {
        #[command(flatten)]
        quantizer: QuantizerArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        representation: ProbeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean UED across augmentation intensities.
    Sweep {
        #[command(flatten)]
        quantizer: QuantizerArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "feature-noise")]
        kind: SweepArg,
        /// Comma-separated intensities, ascending.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Unit usage statistics, plus phoneme purity when a labeled manifest is given.
    Stats {
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn dispatch<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: category={}: {}", e.category(), e.message);
            if e.usage {
                2
            } else {
                1
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NAST_LOG", "warn"))
        .format_timestamp(None)
        .init();
    ExitCode::from(dispatch(std::env::args_os()))
}
