use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sheat::config::{resolve_seed, SEED_ENV};
use sheat::ensemble::default_workers;
use sheat::manifest::RunManifest;
use sheat::{execute, Command, ExperimentConfig, RunContext, RunError, RunResult};

/// Simulation and verification runs for the stochastic heat equation.
#[derive(Debug, Parser)]
#[command(name = "sheat", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run the configuration recorded in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Master seed; wins over SHEAT_SEED and the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (default: output.dir from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value`, applied to the config before validation.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn context(cli: &Cli) -> RunResult<RunContext> {
    let config = match (&cli.config, &cli.manifest) {
        (Some(path), _) => ExperimentConfig::load(path, &cli.overrides)?,
        (None, Some(path)) => {
            let recorded = RunManifest::read(path)?.config;
            let text = recorded.to_toml_string()?;
            ExperimentConfig::from_toml_str(&text, &cli.overrides)?
        }
        (None, None) => ExperimentConfig::from_toml_str("", &cli.overrides)?,
    };
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(cli.seed, env.as_deref(), config.run.master_seed)?;
    let workers = cli.workers.or(config.run.workers).unwrap_or_else(default_workers);
    if workers == 0 {
        return Err(RunError::Config("--workers must be positive".into()));
    }
    let out = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
    Ok(RunContext { config, seed, workers, out })
}

fn main() -> ExitCode {
    // Usage errors are config errors (exit 1), not clap's default 2.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = RunError::Config(e.to_string().trim().to_string());
            eprintln!("{}", err.diagnostic());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    let result = context(&cli).and_then(|ctx| execute(cli.command, &ctx));
    match result {
        Ok(m) => {
            eprintln!("{}: {} outputs in {:.2}s", m.command, m.outputs.len(), m.wall_clock_seconds);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
