use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bma_sim::config::{RunConfig, DEFAULT_OUT_DIR};
use bma_sim::{diagnose, load_config, reproduce, simulate, Diagnostic, Overrides, Suite};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bma-sim", version, about = "Monte Carlo runs of model-averaged evidence aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a configuration without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every design point of a configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Regenerate the reference weight table and scaled-error summaries.
    Reproduce {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Optional; supplies replications, seed and parallelism.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Rate, decay, divergence or PAC diagnostics for a configuration.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        diagnostic: Diagnostic,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Args)]
struct OverrideArgs {
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replications per design point.
    #[arg(long)]
    reps: Option<u64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides { out_dir: a.out, parallelism: a.parallelism, seed: a.seed, replications: a.reps }
    }
}

fn configured(path: &PathBuf, overrides: OverrideArgs) -> anyhow::Result<RunConfig> {
    let config = load_config(path).with_context(|| format!("invalid config {}", path.display()))?;
    Ok(Overrides::from(overrides).apply(config)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let files = match cli.command {
        Command::ValidateConfig { config } => {
            let cfg = load_config(&config).with_context(|| format!("invalid config {}", config.display()))?;
            let points = cfg.points()?.len();
            println!("ok: {} design(s), {points} design point(s)", cfg.designs.len());
            return Ok(());
        }
        Command::Simulate { config, overrides } => {
            let cfg = configured(&config, overrides)?;
            simulate(&cfg, &cfg.out_dir)?
        }
        Command::Reproduce { suite, config, overrides } => {
            let cfg = match config {
                Some(path) => configured(&path, overrides)?,
                None => {
                    let base = RunConfig { out_dir: PathBuf::from(DEFAULT_OUT_DIR), ..RunConfig::default() };
                    Overrides::from(overrides).apply(base)?
                }
            };
            reproduce(&cfg, suite, &cfg.out_dir)?
        }
        Command::Diagnose { config, diagnostic, overrides } => {
            let cfg = configured(&config, overrides)?;
            diagnose(&cfg, diagnostic, &cfg.out_dir)?
        }
    };
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
