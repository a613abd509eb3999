use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixopt::commands;
use mixopt::config::{Result, RunConfig};
use mixopt_core::Error;

#[derive(Parser)]
#[command(name = "mixopt", version, about = "Data-mixture optimization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed stored in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Build on upstream artifacts even when their manifests do not match.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one n-gram expert per training domain.
    TrainExperts,
    /// Cache per-token expert probabilities on every validation domain.
    BuildCaches,
    /// Draw the training mixtures.
    SampleMixtures,
    /// Train a small proxy per mixture and measure its validation losses.
    Measure,
    /// Fit loss predictors and score them on held-out splits.
    FitEval,
    /// Search the simplex for the mixture minimizing predicted loss.
    Optimize,
    /// Check the mixture-ensemble identity on random finite instances.
    VerifyProp1,
}

fn run(cli: &Cli) -> Result<()> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config", "required"))?;
    let cfg = RunConfig::load(config_path, cli.seed)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("--threads", e.to_string()))?;
    }
    match cli.command {
        Command::TrainExperts => commands::cmd_train_experts(&cfg),
        Command::BuildCaches => commands::cmd_build_caches(&cfg, cli.force),
        Command::SampleMixtures => commands::cmd_sample_mixtures(&cfg),
        Command::Measure => commands::cmd_measure(&cfg, cli.force),
        Command::FitEval => commands::cmd_fit_eval(&cfg, cli.force),
        Command::Optimize => commands::cmd_optimize(&cfg, cli.force),
        Command::VerifyProp1 => commands::cmd_verify_prop1(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_or_io() { 2 } else { 1 })
        }
    }
}
