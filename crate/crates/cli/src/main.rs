//! `metaformer`: build, inspect, run and verify MetaFormer baselines.

mod commands;
mod selftest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{Outcome, UsageError};

#[derive(Debug, Parser)]
#[command(name = "metaformer", version, about = "MetaFormer baselines: inference, accounting and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the stage layout of a model.
    Describe(ModelArgs),
    /// Report parameters, MACs and activation FLOPs.
    Count(CountArgs),
    /// Run a forward pass and write the logits.
    Forward(ForwardArgs),
    /// Emit the size table for a list of models.
    Tables(TablesArgs),
    /// Monte-Carlo moments of Squared ReLU and StarReLU under N(0, 1) input.
    StarStats(StarStatsArgs),
    /// Compare analytic activation derivatives with central differences.
    Gradcheck(GradcheckArgs),
    /// Run every verification check and print one verdict per line.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// Named model, e.g. CAFormer-S18.
    #[arg(long)]
    model: Option<String>,
    /// JSON model configuration file.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[command(flatten)]
    source: ModelSource,
}

#[derive(Debug, Args)]
struct CountArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Square input resolution; must be a multiple of 32.
    #[arg(long)]
    resolution: Option<usize>,
    /// Activation used for the FLOP count (defaults to the model's own).
    #[arg(long)]
    activation: Option<String>,
    /// Emit a single `name,params,frozen_params,macs,resolution` row.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct InputSource {
    /// Input tensor file (MFT1, shape B×3×H×W).
    #[arg(long)]
    input: Option<std::path::PathBuf>,
    /// Draw a standard normal input from this seed.
    #[arg(long)]
    random: Option<u64>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct WeightSource {
    /// Checkpoint file (MFW1).
    #[arg(long)]
    weights: Option<std::path::PathBuf>,
    /// Initialize weights from this seed.
    #[arg(long)]
    init: Option<u64>,
}

#[derive(Debug, Args)]
struct ForwardArgs {
    #[command(flatten)]
    source: ModelSource,
    #[command(flatten)]
    input: InputSource,
    #[command(flatten)]
    weights: WeightSource,
    /// Number of top classes to print per sample.
    #[arg(long, default_value_t = 5)]
    topk: usize,
    /// Where to write the logits tensor.
    #[arg(long, default_value = "logits.mft")]
    output: std::path::PathBuf,
    /// Batch size for `--random` input.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Resolution for `--random` input (defaults to the model's).
    #[arg(long)]
    resolution: Option<usize>,
    /// Also save the weights used to this checkpoint file.
    #[arg(long)]
    save_weights: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TableChoice {
    /// IdentityFormer, RandFormer and PoolFormerV2 at five sizes.
    T3,
    /// ConvFormer and CAFormer at four sizes.
    T4,
}

#[derive(Debug, Args)]
struct TablesArgs {
    #[arg(long, value_enum)]
    which: TableChoice,
    #[arg(long, default_value_t = metaformer_core::models::DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Args)]
struct StarStatsArgs {
    #[arg(long, default_value_t = 10_000_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// relu, gelu, squared-relu, starrelu or starrelu-<variant>.
    #[arg(long)]
    activation: String,
    #[arg(long, default_value_t = 1000)]
    points: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Samples for the moment check.
    #[arg(long, default_value_t = 10_000_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Describe(a) => commands::describe(&commands::resolve_config(a.source.model, a.source.config)?),
        Command::Count(a) => {
            let config = commands::resolve_config(a.source.model, a.source.config)?;
            commands::count(&config, a.resolution, a.activation.as_deref(), a.csv)
        }
        Command::Forward(a) => {
            let config = commands::resolve_config(a.source.model, a.source.config)?;
            commands::forward(commands::ForwardRequest {
                config,
                input: a.input.input,
                random: a.input.random,
                weights: a.weights.weights,
                init: a.weights.init,
                topk: a.topk,
                output: a.output,
                batch: a.batch,
                resolution: a.resolution,
                save_weights: a.save_weights,
            })
        }
        Command::Tables(a) => {
            let names: &[&str] = match a.which {
                TableChoice::T3 => &metaformer_core::models::BASIC_TABLE_MODELS,
                TableChoice::T4 => &metaformer_core::models::CONV_TABLE_MODELS,
            };
            commands::tables(names, a.resolution, a.csv)
        }
        Command::StarStats(a) => commands::star_stats(a.samples, a.seed),
        Command::Gradcheck(a) => commands::gradcheck(&a.activation, a.points, a.h, a.seed),
        Command::Selftest(a) => selftest::run(a.samples, a.seed),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let user_error = err
        .chain()
        .any(|e| e.is::<metaformer_core::Error>() || e.is::<UsageError>());
    if user_error {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
