//! `gcc-unet`: train, evaluate, infer, verify gradients and write synthetic
//! corpora.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 numerical abort.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<gcc_unet::Error> for CliError {
    fn from(e: gcc_unet::Error) -> Self {
        let code = match e {
            gcc_unet::Error::NumericalAbort { .. } | gcc_unet::Error::NonFinite { .. } => 3,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "gcc-unet",
    version,
    about = "Retinal vessel segmentation with graph capsule convolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, history and a manifest.
    Train(TrainArgs),
    /// Score a trained model, a directory of probability masks, or a
    /// variant sweep.
    Eval(EvalArgs),
    /// Write probability and binary masks for images.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus in the DRIVE directory layout.
    Synth(SynthArgs),
}

/// Configuration shared by commands that build data or models. Every flag
/// overrides the matching key of `--config`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat JSON config, or a run manifest to repeat its run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds data generation, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `synthetic` or `drive:<root>` [default: synthetic].
    #[arg(long)]
    pub data: Option<String>,
    /// Shorthand for `--data synthetic`.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: bool,
    /// local_only, global_vanilla, global_gc or fusion [default: fusion].
    #[arg(long)]
    pub variant: Option<String>,
    /// Maximum training epochs [default: 60].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Early-stopping patience in epochs [default: 10].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Synthetic corpus size [default: 40].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Synthetic image side [default: 48].
    #[arg(long)]
    pub size: Option<usize>,
    /// Train on square patches of this side.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Patch stride [default: the patch side].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Any other config key, as `key=json`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn overrides(&self) -> Result<Map<String, Value>, CliError> {
        let mut m = Map::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects key=value, got `{kv}`")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            m.insert(k.to_string(), value);
        }
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("seed", self.seed.map(Value::from));
        put("data", self.data.clone().map(Value::from));
        if self.synthetic {
            put("data", Some(Value::from("synthetic")));
        }
        put("variant", self.variant.clone().map(Value::from));
        put("max_epochs", self.epochs.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("learning_rate", self.lr.map(Value::from));
        put("patience", self.patience.map(Value::from));
        put("samples", self.samples.map(Value::from));
        put("size", self.size.map(Value::from));
        put("patch", self.patch.map(Value::from));
        put("stride", self.stride.map(Value::from));
        Ok(m)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory [default: runs/<variant>-seed<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory written by `train`; supplies config and weights.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Weights file, overriding the run's `model.gccw`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score `<id>_prob.png` masks from this directory instead of a model.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    /// Train and score each listed variant, one table row per variant.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = gcc_unet::metrics::EVAL_THRESHOLD)]
    pub threshold: f64,
    /// Predict on overlapping windows of this side.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Report directory [default: `<run>/eval`, or `eval`].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Images to segment; without any, the configured dataset split is used.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Edge-pad images whose extents the network cannot divide.
    #[arg(long)]
    pub pad: bool,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long, default_value_t = gcc_unet::metrics::EVAL_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Check a single operator or block.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print one JSON object per check instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
