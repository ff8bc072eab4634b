//! Command-line front end. Every subcommand reads a JSON run config (optional)
//! overlaid with flags and writes its artifacts under the output directory.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// Failure carrying the name of the module that raised it.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub message: String,
    /// Bad invocation (exit code 2) rather than a runtime failure (exit code 1).
    pub usage: bool,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            module: "cli",
            message: message.into(),
            usage: true,
        }
    }

    pub fn runtime(module: &'static str, message: impl fmt::Display) -> Self {
        Self {
            module,
            message: message.to_string(),
            usage: false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.usage {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    /// `error[module]: message` on one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {}", self.module, one_line)
    }
}

macro_rules! from_module {
    ($($ty:ty => $name:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::runtime($name, e)
            }
        })*
    };
}

from_module! {
    crate::corpus::CorpusError => "corpus",
    crate::tokenizer::TokenizerError => "tokenizer",
    crate::model::ModelError => "model",
    crate::trainer::TrainError => "trainer",
    crate::trainer::CheckpointError => "trainer",
    crate::eval::EvalError => "eval",
    crate::diagnostics::DiagnosticsError => "diagnostics",
    crate::ensemble::EnsembleError => "ensemble",
}

impl From<crate::pipeline::PipelineError> for CliError {
    fn from(e: crate::pipeline::PipelineError) -> Self {
        match e {
            crate::pipeline::PipelineError::Corpus(e) => e.into(),
            crate::pipeline::PipelineError::Tokenizer(e) => e.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "newsbench",
    version,
    about = "News classification pipeline: curate, train, evaluate, diagnose, ensemble"
)]
pub struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for all outputs.
    #[arg(long, short = 'o', global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps intra-command parallelism.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// JSON Lines dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Split manifest written by `split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Vocabulary file written by `build-vocab` or `train`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-category length statistics and the balance ratio.
    Stats {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Stopword list (one word per line); defaults to the bundled list.
        #[arg(long)]
        stopwords: Option<PathBuf>,
    },
    /// Candidate labels from regex rules.
    Bootstrap {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// JSON object mapping category to an array of patterns.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Seeded train/validation/test split.
    Split {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Three comma-separated fractions.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        stratify: bool,
    },
    /// Vocabulary from the train partition.
    BuildVocab {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Trains a classifier with per-epoch checkpoints.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Continue from the latest epoch checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Metrics and confusion matrices for one partition.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, validation or test.
        #[arg(long)]
        partition: Option<String>,
    },
    /// Prediction certainty under Monte Carlo dropout.
    McDropout {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        partition: Option<String>,
        /// Number of stochastic passes.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// t-SNE projection of last-layer [CLS] states.
    Tsne {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        partition: Option<String>,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Majority vote over member checkpoints.
    Ensemble {
        #[command(flatten)]
        data: DataArgs,
        /// JSON array of checkpoint paths, or an array of such arrays (one per repetition).
        #[arg(long)]
        members: Option<PathBuf>,
        #[arg(long)]
        partition: Option<String>,
    },
    /// Writes a keyword-separable synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Fraction of labels replaced by a different class.
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
    },
}

/// Parses `args` and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::usage(first.trim_start_matches("error: ").to_owned()));
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        // Fails only if a pool already exists, e.g. when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = RunConfig::resolve(cli.config.as_deref(), cli.out, cli.seed)?;
    commands::dispatch(cli.command, config)
}

/// Binary entry point: runs and exits with the documented codes.
pub fn main() {
    if let Err(e) = run(std::env::args_os()) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
