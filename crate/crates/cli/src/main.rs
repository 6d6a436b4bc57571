//! `protonet`: prepare splits, train, evaluate and explain prototypical
//! few-shot classifiers.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;
mod loader;

use std::error::Error as StdError;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use protonet_core::checkpoint::CheckpointError;
use protonet_core::data::DataError;
use protonet_core::encoder::{Archetype, EncoderError};
use protonet_core::eval::EvalError;
use protonet_core::explain::ExplainError;
use protonet_core::head::HeadError;
use protonet_core::train::TrainError;
use protonet_core::TensorError;

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "protonet", version, about = "Prototypical few-shot classification")]
struct Cli {
    /// TOML run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    ways: Option<usize>,
    #[arg(long, global = true)]
    shots: Option<usize>,
    /// Queries per class in each episode.
    #[arg(long, global = true)]
    query: Option<usize>,
    #[arg(long, global = true, value_enum)]
    encoder: Option<EncoderArg>,
    /// Output directory for manifests, checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncoderArg {
    ConvNet,
    FrozenEmbed,
}

impl From<EncoderArg> for Archetype {
    fn from(a: EncoderArg) -> Self {
        match a {
            EncoderArg::ConvNet => Archetype::ConvNet,
            EncoderArg::FrozenEmbed => Archetype::FrozenEmbed,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter the manifest, regroup classes and write video-disjoint splits.
    Prepare,
    /// Episodic training on the prepared train split.
    Train,
    /// Episodic evaluation over the configured shot sweep.
    Eval {
        /// Defaults to `<out>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Grad-CAM overlays for confident and misclassified test queries.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

const CONFIG: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite { .. } => NUMERICAL,
        _ => CONFIG,
    }
}

fn encoder_code(e: &EncoderError) -> u8 {
    match e {
        EncoderError::Tensor(t) => tensor_code(t),
        _ => CONFIG,
    }
}

fn head_code(e: &HeadError) -> u8 {
    match e {
        HeadError::EmptyClass(_) => DATA,
        HeadError::Tensor(t) => tensor_code(t),
        _ => CONFIG,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Tensor(t) => tensor_code(t),
        _ => DATA,
    }
}

fn classify(e: &(dyn StdError + 'static)) -> Option<u8> {
    if let Some(e) = e.downcast_ref::<TrainError>() {
        return Some(match e {
            TrainError::Config(_) => CONFIG,
            TrainError::Sampling { source, .. } | TrainError::Data(source) => data_code(source),
            TrainError::Encoder(e) => encoder_code(e),
            TrainError::Head(e) => head_code(e),
            TrainError::Tensor(e) => tensor_code(e),
        });
    }
    if let Some(e) = e.downcast_ref::<EvalError>() {
        return Some(match e {
            EvalError::Data(d) => data_code(d),
            EvalError::Encoder(e) => encoder_code(e),
            EvalError::Head(e) => head_code(e),
            _ => CONFIG,
        });
    }
    if let Some(e) = e.downcast_ref::<ExplainError>() {
        return Some(match e {
            ExplainError::NonFinite => NUMERICAL,
            ExplainError::Encoder(e) => encoder_code(e),
            ExplainError::Head(e) => head_code(e),
            ExplainError::Tensor(e) => tensor_code(e),
            _ => CONFIG,
        });
    }
    if let Some(e) = e.downcast_ref::<DataError>() {
        return Some(data_code(e));
    }
    if let Some(e) = e.downcast_ref::<CheckpointError>() {
        return Some(match e {
            CheckpointError::Encoder(e) => encoder_code(e),
            _ => DATA,
        });
    }
    if let Some(e) = e.downcast_ref::<EncoderError>() {
        return Some(encoder_code(e));
    }
    if let Some(e) = e.downcast_ref::<HeadError>() {
        return Some(head_code(e));
    }
    if let Some(e) = e.downcast_ref::<TensorError>() {
        return Some(tensor_code(e));
    }
    if e.is::<std::io::Error>() {
        return Some(DATA);
    }
    None
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(classify).unwrap_or(CONFIG)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        ways: cli.ways,
        shots: cli.shots,
        query: cli.query,
        encoder: cli.encoder.map(Into::into),
        out: cli.out,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Prepare => commands::prepare(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval { checkpoint } => commands::eval(&cfg, checkpoint.as_deref()),
        Command::Explain { checkpoint } => commands::explain(&cfg, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
