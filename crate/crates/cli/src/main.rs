use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fedreward_core::experiment::{self, ExperimentConfig, GridSpec, Overrides};

/// Federated reward aggregation experiments.
#[derive(Parser)]
#[command(name = "fedreward", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json, rounds.jsonl and summary.csv.
    Run { config: PathBuf },
    /// Run every metric × strategy cell of a grid spec.
    Grid { gridspec: PathBuf },
    /// Build a FI vs MinAS scatter table from run reports.
    ExportScatter {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
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

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let overrides = Overrides::from_env()?;
            let report = experiment::run(&cfg, &overrides)?;
            let own = report
                .summary
                .get(report.client_reward)
                .context("report lacks its training metric")?;
            println!(
                "{} {} rounds={} fi={:.4} avg_as={:.4} min_as={:.4}",
                report.client_reward,
                report.strategy,
                report.rounds_completed,
                own.fi,
                own.avg_as,
                own.min_as
            );
        }
        Command::Grid { gridspec } => {
            let spec = GridSpec::from_file(&gridspec)
                .with_context(|| format!("loading {}", gridspec.display()))?;
            let outcome = experiment::run_grid(&spec, &Overrides::from_env()?)?;
            let failed: Vec<_> = outcome.cells.iter().filter(|c| c.error.is_some()).collect();
            for c in &failed {
                eprintln!(
                    "cell {}/{} failed: {}",
                    c.client_reward,
                    c.strategy,
                    c.error.as_deref().unwrap_or_default()
                );
            }
            print!("{}", outcome.summary_csv);
            if !failed.is_empty() {
                bail!("{} of {} grid cells failed", failed.len(), outcome.cells.len());
            }
        }
        Command::ExportScatter { reports, output } => {
            let loaded = reports
                .iter()
                .map(|p| experiment::read_report(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let csv = experiment::export_scatter(&loaded)?;
            fs::write(&output, csv).with_context(|| format!("writing {}", output.display()))?;
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let data = cfg.load_dataset()?;
            println!(
                "ok: {} groups, {} questions, metric {}, strategy {}",
                data.num_groups(),
                data.num_questions(),
                cfg.metric,
                cfg.strategy.label()
            );
        }
    }
    Ok(())
}
