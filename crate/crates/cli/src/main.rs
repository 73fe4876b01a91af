use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use predplan_cli::{gradcheck, run, CliError, ExperimentConfig, GRADCHECK_TOLERANCE};

#[derive(Parser)]
#[command(
    name = "predplan",
    version,
    about = "Train and check planning-by-prediction policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run { config: PathBuf },
    /// Compare BPTT gradients with finite differences.
    Gradcheck { config: PathBuf },
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn main_inner(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(cli, config)?;
            let out = cfg.out.clone().unwrap_or_else(|| {
                PathBuf::from(format!("runs/{}-seed{}", cfg.experiment, cfg.seed))
            });
            run(&cfg, &out)?;
            println!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Gradcheck { config } => {
            let cfg = load(cli, config)?;
            let summary = gradcheck(&cfg)?;
            let max = summary.max_rel_error();
            println!(
                "{}: {} draws, T = {}, max relative error {max:e} ({} rejected near kinks)",
                cfg.experiment,
                summary.results.len(),
                cfg.gradcheck.horizon,
                summary.rejected
            );
            if max <= GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                Err(CliError::Gradcheck {
                    max,
                    tolerance: GRADCHECK_TOLERANCE,
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
