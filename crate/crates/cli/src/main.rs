//! `unlearn`: drives corpus generation, memorization, unlearning, scoring,
//! sweeps and curve export from one TOML config plus flag overrides.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "unlearn", version = unlearn_core::provenance::version(), about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of the stage being run (corpus, memorization, unlearning or first sweep seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Re-roots every artifact path under this directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Concurrent sweep workers.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Clone, Default)]
pub struct UnlearnFlags {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Gen,
    /// Train the target model on the forget and retain splits.
    Memorize,
    /// Attach fresh LoRA pairs to the target and unlearn the forget split.
    Unlearn(UnlearnFlags),
    /// Score a checkpoint.
    Eval {
        /// Checkpoint directory; the target model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured (gamma, delta, rank) grid over several seeds.
    Sweep,
    /// Turn run logs into score-vs-epoch CSV series.
    Report,
    /// Print the effective configuration, or its violations.
    Config,
}

fn error_class(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<unlearn_core::Error>() {
            return e.class();
        }
        if let Some(e) = cause.downcast_ref::<commands::CliError>() {
            return e.class;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error=usage {first}");
            return ExitCode::from(2);
        }
    };
    let common = cli.common;
    let result = match cli.command {
        Command::Gen => commands::gen(&common),
        Command::Memorize => commands::memorize(&common),
        Command::Unlearn(flags) => commands::unlearn(&common, &flags),
        Command::Eval { checkpoint } => commands::eval(&common, checkpoint.as_deref()),
        Command::Sweep => commands::sweep(&common),
        Command::Report => commands::report(&common),
        Command::Config => commands::show_config(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error={} {msg}", error_class(&e));
            ExitCode::FAILURE
        }
    }
}
