//! `nucleosynth` command line: dataset generation, training of both stages,
//! sampling, end-to-end augmentation, evaluation and self-verification.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod run_dir;
pub mod verify;

pub use config::RunConfig;

/// Everything that can stop a subcommand.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(nucleosynth::Error),
    Io(PathBuf, std::io::Error),
    /// The output directory already holds a completed run.
    Completed(PathBuf),
    Verify(Vec<String>),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(_) => "pipeline",
            CliError::Io(..) => "io",
            CliError::Completed(_) => "run-exists",
            CliError::Verify(_) => "verify",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Completed(p) => write!(f, "{} already holds a completed run; use a new directory", p.display()),
            CliError::Verify(failed) => write!(f, "failed checks: {}", failed.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<nucleosynth::Error> for CliError {
    fn from(e: nucleosynth::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "nucleosynth", version, about = "Two-stage synthesis of labelled nuclei tiles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every run that writes a run directory.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory (created; must not hold a completed run).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set stage1.train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural training dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples (defaults to `data.n`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the joint structure-map / label denoiser.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the image autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the prompt-conditioned latent denoiser (frozen afterwards).
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
    },
    /// Fine-tune the control branch against a frozen base.
    TrainControl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        base: PathBuf,
    },
    /// Sample labels, structure maps and instances from prompts.
    SampleLabels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1: PathBuf,
        /// One prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        /// Samples per prompt.
        #[arg(long)]
        n: usize,
    },
    /// Render images for a label set.
    SampleImages {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labels: PathBuf,
        /// Label `i` is paired with prompt `i mod len`.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        control: PathBuf,
    },
    /// Full pipeline from prompts to a dataset directory.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompts: PathBuf,
        /// Samples per prompt.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        control: PathBuf,
    },
    /// Compare a synthetic dataset with a real one.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
    },
    /// Run the built-in oracle checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Worker cap from `NUCLEOSYNTH_THREADS` (default 1).
pub fn thread_cap() -> CliResult<usize> {
    match std::env::var("NUCLEOSYNTH_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("NUCLEOSYNTH_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

fn report(e: &CliError) {
    let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{msg}");
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            1
        }
    }
}
