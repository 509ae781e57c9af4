use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

/// Predicts peak GPU memory of a training task from a CPU profiler trace.
#[derive(Debug, Parser)]
#[command(name = "peakmem", version, about)]
struct Cli {
    /// More log output; repeat for debug and trace levels.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// JSON file with default settings (device_capacity, max_split_size_mb,
    /// iterations, include_initial_memory). Flags override it.
    #[arg(long, env = "PEAKMEM_CONFIG", global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the peak memory of a traced training task.
    Estimate(commands::estimate::EstimateArgs),
    /// Replay a request sequence through the allocator model.
    Replay(commands::replay::ReplayArgs),
    /// Print the layer, operator and memory structure found in a trace.
    Analyze(commands::analyze::AnalyzeArgs),
    /// Score estimate reports against measured runs.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Cross-check the allocator model against the reference on random sequences.
    Selftest(commands::selftest::SelftestArgs),
}

/// Allocator settings shared by the commands that replay.
#[derive(Debug, Clone, Args)]
pub struct AllocatorArgs {
    /// Device memory, e.g. `8GiB` or a byte count.
    #[arg(long, value_parser = output::parse_size_arg)]
    pub device_capacity: Option<u64>,

    /// Cached blocks above this size (MiB) are never split.
    #[arg(long)]
    pub max_split_size_mb: Option<u64>,
}

/// How a command ended when it did not fail outright.
pub enum Outcome {
    Ok,
    /// The command worked but its verdict is negative (predicted OOM,
    /// oracle mismatch).
    Flagged,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = config::Config::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Estimate(args) => commands::estimate::run(args, &cfg),
        Command::Replay(args) => commands::replay::run(args, &cfg),
        Command::Analyze(args) => commands::analyze::run(args),
        Command::Evaluate(args) => commands::evaluate::run(args),
        Command::Selftest(args) => commands::selftest::run(args, &cfg),
    });
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Flagged) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
