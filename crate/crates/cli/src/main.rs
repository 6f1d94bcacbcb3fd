//! `dm` — generate data, train, infer, evaluate and benchmark the
//! detect-and-match pipeline from the command line.
//!
//! Every command echoes its fully resolved configuration as JSON (stdout
//! and `run_config.json` in the output directory when one exists), so any
//! run can be reproduced bit for bit from its own log.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dm_core::DmError;

#[derive(Parser)]
#[command(name = "dm", version, about = "Key-moment detection and sound-effect matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with a planted signal.
    Generate(commands::GenerateArgs),
    /// Pre-train the video and SFX encoders with the matching loss.
    Pretrain(commands::PretrainArgs),
    /// End-to-end training with Hungarian-matched span and matching losses.
    Train(commands::TrainArgs),
    /// Run inference and write predictions as JSONL.
    Infer(commands::InferArgs),
    /// Score predictions with the pooled average-precision protocols.
    Eval(commands::EvalArgs),
    /// Sliding-window baseline over a pre-trained matching model.
    Baseline(commands::BaselineArgs),
    /// Dataset statistics with CSV and SVG histograms.
    Stats(commands::StatsArgs),
    /// Finite-difference gradient checks for every differentiable op.
    Gradcheck(commands::GradcheckArgs),
}

fn exit_code_for(err: &DmError) -> u8 {
    match err {
        DmError::Config(_) => 1,
        DmError::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Train(args) => commands::train(args),
        Command::Infer(args) => commands::infer(args),
        Command::Eval(args) => commands::eval(args),
        Command::Baseline(args) => commands::baseline(args),
        Command::Stats(args) => commands::stats(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
