mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seqdg::data::DataError;
use seqdg::eval::EvalError;
use seqdg::model::ModelError;
use seqdg::synth::SynthError;
use seqdg::tensor::TensorError;
use seqdg::train::TrainError;

use config::ConfigError;

#[derive(Parser)]
#[command(name = "seqdg", version, about = "Sequence-context action recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML run configuration; unknown keys are errors.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (default: a fresh directory under $SEQDG_OUT_ROOT or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Log to the run directory only.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Window length.
    #[arg(long = "W")]
    pub window: Option<usize>,
    #[arg(long)]
    pub lambda_rv: Option<f64>,
    #[arg(long)]
    pub lambda_rt: Option<f64>,
    #[arg(long)]
    pub p_mix: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Source,
    Target,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and its ground truth.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Build a dataset from an annotation CSV and feature blobs.
    Import {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        blob: Option<PathBuf>,
        #[arg(long)]
        text_features: Option<PathBuf>,
        /// Domain held out as a target; repeatable.
        #[arg(long = "target-domain")]
        target_domains: Vec<String>,
    },
    /// Train on the source domains, then evaluate on source and target.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset manifest.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with sliding-window inference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest (default: the one the checkpoint was trained on).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        split: Split,
        /// Must match the trained window length.
        #[arg(long = "W")]
        window: Option<usize>,
    },
    /// Train and evaluate every point of a component grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Count label sub-sequences that recur across domains.
    SeqStats {
        #[command(flatten)]
        common: Common,
        /// Annotation CSVs; repeatable.
        #[arg(long)]
        annotations: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        max_length: Option<usize>,
    },
    /// Finite-difference check of the full training objective.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen { common } => commands::synth_gen(&common),
        Command::Import {
            common,
            annotations,
            blob,
            text_features,
            target_domains,
        } => commands::import(&common, annotations, blob, text_features, target_domains),
        Command::Train {
            common,
            overrides,
            data,
        } => commands::train(&common, &overrides, data),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            window,
        } => commands::eval(&common, &checkpoint, data, split, window),
        Command::Ablate {
            common,
            overrides,
            data,
        } => commands::ablate(&common, &overrides, data),
        Command::SeqStats {
            common,
            annotations,
            data,
            max_length,
        } => commands::seq_stats(&common, annotations, data, max_length),
        Command::GradCheck { common, overrides } => commands::grad_check(&common, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Gradient check found mismatching coordinates.
#[derive(Debug)]
pub struct GradientMismatch(pub String);

impl std::fmt::Display for GradientMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for GradientMismatch {}

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const NUMERIC: u8 = 4;
const OTHER: u8 = 1;

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite { .. } => NUMERIC,
        _ => OTHER,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::EvenWindow(_) => CONFIG,
        _ => DATA,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) | ModelError::EvenWindow(_) => CONFIG,
        ModelError::Tensor(t) => tensor_code(t),
        ModelError::Checkpoint(_) | ModelError::Io(_) | ModelError::Params(_) => DATA,
        _ => OTHER,
    }
}

/// 2 configuration, 3 data, 4 numerical divergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return CONFIG;
        }
        if cause.is::<GradientMismatch>() {
            return NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Config(_) => CONFIG,
                TrainError::Divergence { .. } => NUMERIC,
                TrainError::Data(d) => data_code(d),
                TrainError::TargetLeak { .. } => DATA,
                TrainError::Model(m) => model_code(m),
                TrainError::Tensor(t) => tensor_code(t),
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::WindowMismatch { .. } | EvalError::TopK { .. } => CONFIG,
                EvalError::Data(d) => data_code(d),
                EvalError::Model(m) => model_code(m),
                EvalError::Tensor(t) => tensor_code(t),
                EvalError::LabelCount { .. } | EvalError::Io(_) => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return match e {
                SynthError::Config(_) => CONFIG,
                SynthError::Data(d) => data_code(d),
                SynthError::Json(_) => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return data_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_code(e);
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return tensor_code(e);
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return DATA;
        }
    }
    OTHER
}
