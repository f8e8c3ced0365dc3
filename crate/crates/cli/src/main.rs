//! `psyq`: ask, answer and detect personality types from posts.

mod commands;
mod config;
mod pipeline;
mod run;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::SweepKind;

#[derive(Parser, Debug)]
#[command(name = "psyq", version, about = "Questionnaire-guided personality detection from user posts")]
struct Cli {
    /// More log output (-v debug, -vv trace)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with latent trait profiles
    GenSynthetic(commands::GenArgs),
    /// Collect questionnaire answers per (user, item) pair
    Ask(commands::AskArgs),
    /// Pretrain the answer module, then train jointly with early stopping
    Train(commands::TrainArgs),
    /// Score a trained model on one split
    Eval(commands::EvalArgs),
    /// Train and score every ablation variant over several seeds
    Ablate(commands::AblateArgs),
    /// Accumulate expert gate activations per dimension
    AnalyzeExperts(commands::AnalyzeArgs),
    /// Vary the fraction of training users
    SweepDataFraction(commands::SweepArgs),
    /// Vary the number of questionnaire items
    SweepQuestions(commands::SweepArgs),
    /// Vary the number of experts
    SweepExperts(commands::SweepArgs),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    run::init_logging(cli.verbose);
    match &cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Ask(a) => commands::ask(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::AnalyzeExperts(a) => commands::analyze_experts(a),
        Command::SweepDataFraction(a) => commands::sweep(SweepKind::DataFraction, a),
        Command::SweepQuestions(a) => commands::sweep(SweepKind::Questions, a),
        Command::SweepExperts(a) => commands::sweep(SweepKind::Experts, a),
    }
}
