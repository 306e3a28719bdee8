//! `jumpsae`: train and evaluate JumpReLU sparse autoencoders.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};

use commands::{DarkmatterArgs, EvalArgs, GenArgs, InspectArgs, MatchArgs, SweepArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "jumpsae", version, about = "Train and evaluate JumpReLU sparse autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic activations with planted features.
    GenSynthetic(GenArgs),
    /// Train an SAE and write it in SAEMDL01 format.
    Train(TrainArgs),
    /// Sparsity and fidelity metrics for a trained model.
    Eval(EvalArgs),
    /// Linear probes on the reconstruction error.
    Darkmatter(DarkmatterArgs),
    /// Match the features of one model into another.
    Match(MatchArgs),
    /// Train one model per L0 target and tabulate the metrics.
    Sweep(SweepArgs),
    /// Validate SAEACT01 shards and print their headers.
    InspectShard(InspectArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Darkmatter(a) => commands::darkmatter(a),
        Command::Match(a) => commands::matching(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::InspectShard(a) => commands::inspect_shard(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
