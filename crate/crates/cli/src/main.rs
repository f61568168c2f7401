//! `xdlm`: data preparation, training, decoding and scoring for the diffusion translator.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Profile;

#[derive(Parser)]
#[command(name = "xdlm", version, about = "Cross-lingual discrete diffusion translation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by every subcommand.
#[derive(Args, Clone)]
pub struct Common {
    /// Default values to start from.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// TOML file applied on top of the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed from which every random stream is derived.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `section.key=value`, applied last. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a parallel corpus or synthesize a toy one, and print its statistics.
    Prepare(commands::PrepareArgs),
    /// Fit joint BPE merges and the shared vocabulary.
    BpeTrain(commands::BpeTrainArgs),
    /// Cross-lingual pretraining on concatenated pairs.
    Pretrain(commands::TrainArgs),
    /// Translation training, from a checkpoint or explicitly from scratch.
    Finetune(commands::TrainArgs),
    /// Translate source lines.
    Generate(commands::GenerateArgs),
    /// Score hypotheses against references.
    Evaluate(commands::EvaluateArgs),
    /// Score a test set at several iteration counts.
    Sweep(commands::SweepArgs),
    /// Check the reverse sampler against the exact posterior on every small instance.
    OracleCheck(commands::OracleArgs),
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            eprintln!("error: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&cli.common, a),
        Command::BpeTrain(a) => commands::bpe_train(&cli.common, a),
        Command::Pretrain(a) => commands::train(&cli.common, a, false),
        Command::Finetune(a) => commands::train(&cli.common, a, true),
        Command::Generate(a) => commands::generate(&cli.common, a),
        Command::Evaluate(a) => commands::evaluate(&cli.common, a),
        Command::Sweep(a) => commands::sweep(&cli.common, a),
        Command::OracleCheck(a) => commands::oracle_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
