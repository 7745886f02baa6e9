//! `dau`: train, evaluate, verify and analyze DAU networks.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or input error,
//! 3 internal error. Failures print one line to stderr:
//! `error kind=<kind> exit=<code>: <message>`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dau_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dau", version, about = "Displaced aggregation unit networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory holding the CIFAR-10 binary files.
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed; overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to DAU_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Configuration override, repeatable; wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write checkpoints, metrics and the resolved config.
    Train {
        /// Continue from this checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on the test split.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks of every layer's gradients.
    Gradcheck {
        /// Also check the analytic displacement gradient on smooth inputs.
        #[arg(long)]
        analytic: bool,
        /// Perturb the computed gradients (harness self-test; must fail).
        #[arg(long)]
        corrupt: bool,
        /// Random instances per DAU parameter class.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Fast path versus explicit-filter oracle over random cases.
    Oraclecheck {
        /// Only integer displacements.
        #[arg(long)]
        integer_only: bool,
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
    /// Displacement histograms and scatter exports per DAU layer.
    Analyze {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// 1-based layer position (`net.layerN`); default every DAU layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Retained fractions of the largest |w|.
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.9,0.75")]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = dau_core::analysis::DEFAULT_BIN_WIDTH)]
        bin_width: f64,
    },
    /// Remove units whose |w| is below tau times a reference maximum.
    Prune {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long)]
        tau: f64,
        /// layer-max, global-max or filter-max.
        #[arg(long, default_value = "layer-max")]
        policy: String,
    },
    /// Write a synthetic dataset in the CIFAR-10 binary layout.
    Synth {
        #[arg(long, default_value_t = 1000)]
        train_per_file: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
    },
}

/// A failure with its exit code and a short machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "check_failed",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) => (2, "config"),
            Error::Spec(_) => (2, "spec"),
            Error::InvalidParam(_) => (2, "invalid_param"),
            Error::NotDau(_) => (2, "not_dau_layer"),
            Error::LayerIndex(_) => (2, "layer_index"),
            Error::MissingFile(_) => (2, "missing_file"),
            Error::Format { .. } => (2, "format"),
            Error::LabelRange { .. } => (2, "label_range"),
            Error::Corrupt(_) => (2, "corrupt_checkpoint"),
            Error::Version { .. } => (2, "checkpoint_version"),
            Error::Io(_) => (2, "io"),
            Error::NonFinite(_) => (3, "non_finite"),
            Error::InvalidDims(_) | Error::DataLength { .. } | Error::Shape(_) => (3, "internal"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn report(f: &Failure) -> ExitCode {
    eprintln!("error kind={} exit={}: {}", f.kind, f.code, one_line(&f.message));
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_default();
        let at = info.location().map(|l| format!(" at {}:{}", l.file(), l.line())).unwrap_or_default();
        eprintln!("error kind=internal exit=3: {}{at}", one_line(&msg));
        std::process::exit(3);
    }));
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(&Failure::usage(first));
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
