//! Command-line entry point for cross-dimensional self-attention
//! imputation experiments.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cdsa",
    version,
    about = "Cross-dimensional self-attention for multivariate, geo-tagged time-series imputation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic data cube.
    GenData(commands::GenDataArgs),
    /// Train an imputation encoder on a cube with artificial removal.
    Train(commands::TrainArgs),
    /// Reconstruct every cell of a cube with a trained model.
    Impute(commands::ImputeArgs),
    /// Score predictions on removed-with-truth cells.
    Eval(commands::EvalArgs),
    /// Profile FLOPs, variable counts, and wall time per variant.
    Bench(commands::BenchArgs),
    /// Write each layer's attention maps as CSV matrices.
    ExportAttention(commands::ExportAttentionArgs),
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Impute(args) => commands::impute(args),
        Command::Eval(args) => commands::eval(args),
        Command::Bench(args) => commands::bench(args),
        Command::ExportAttention(args) => commands::export_attention(args),
    }
}
