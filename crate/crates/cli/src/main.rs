mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

/// Infrared-visible image fusion with distilled text priors.
#[derive(Parser)]
#[command(name = "ivfuse", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a synthetic degradation dataset (procedural scenes or a clean source tree)
    MakeSynth(commands::MakeSynthArgs),
    /// Stage 1: train the text-conditioned teacher network
    TrainTeacher(commands::TrainTeacherArgs),
    /// Stage 2: distill the frozen teacher into the text-free student
    Distill(commands::DistillArgs),
    /// Fuse one visible/infrared pair with a trained checkpoint
    Fuse(commands::FuseArgs),
    /// Fuse a test set and emit the metric report (CSV + Markdown)
    Eval(commands::EvalArgs),
    /// Timing and parameter comparison between two checkpoints
    Bench(commands::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::MakeSynth(a) => commands::make_synth(a),
        Cmd::TrainTeacher(a) => commands::train_teacher(a),
        Cmd::Distill(a) => commands::distill(a),
        Cmd::Fuse(a) => commands::fuse(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
