use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use metaopt_cli::config::{self, Arm};
use metaopt_cli::{runner, summary};

/// Train and evaluate a learned, adversarially robust optimizer.
#[derive(Parser)]
#[command(name = "metaopt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid described by a config file.
    Run {
        config: PathBuf,
        /// Override the config's seed list, e.g. --seeds 1,2,3
        #[arg(long)]
        seeds: Option<String>,
        /// Override the config's arm list, e.g. --arms L2L-Transfer,ADAM
        #[arg(long)]
        arms: Option<String>,
        /// Override the config's epsilon list, e.g. --epsilons 0.05,0.1
        #[arg(long)]
        epsilons: Option<String>,
    },
    /// Aggregate a run directory into summary.csv / summary.txt.
    Summarize { dir: PathBuf },
    /// Validate that the configured dataset files exist and parse.
    CheckData { config: PathBuf },
    /// Write a deterministic synthetic dataset in the canonical binary
    /// format (for environments without the real files).
    GenData {
        /// mnist or cifar10
        #[arg(long)]
        dataset: String,
        /// Target directory for the generated files.
        #[arg(long)]
        dir: PathBuf,
        /// Training samples (mnist).
        #[arg(long, default_value_t = 60_000)]
        train_n: usize,
        /// Test samples.
        #[arg(long, default_value_t = 10_000)]
        test_n: usize,
        /// Records per training batch file (cifar10; five files are written).
        #[arg(long, default_value_t = 10_000)]
        per_batch: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_override<T, F: Fn(&str) -> Result<T>>(s: &str, f: F) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(f)
        .collect()
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seeds,
            arms,
            epsilons,
        } => {
            let mut cfg = config::load_config(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = parse_override(&s, |p| p.parse::<u64>().context("bad seed"))?;
            }
            if let Some(a) = arms {
                cfg.arms = parse_override(&a, Arm::parse)?;
            }
            if let Some(e) = epsilons {
                cfg.epsilon_list =
                    parse_override(&e, |p| p.parse::<f64>().context("bad epsilon"))?;
            }
            let out = runner::run(&cfg)?;
            println!(
                "wrote {} curves and {} under {}",
                out.cells.len(),
                out.metadata_path.file_name().unwrap().to_string_lossy(),
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Summarize { dir } => {
            let rows = summary::write_summary(&dir)?;
            print!("{}", summary::summary_table(&rows));
            Ok(())
        }
        Command::CheckData { config } => {
            let cfg = config::load_config(&config)?;
            println!("{}", runner::check_data(&cfg)?);
            Ok(())
        }
        Command::GenData {
            dataset,
            dir,
            train_n,
            test_n,
            per_batch,
            seed,
        } => {
            match dataset.as_str() {
                "mnist" => metaopt_core::data::synth::write_mnist(&dir, train_n, test_n, seed)?,
                "cifar10" => {
                    metaopt_core::data::synth::write_cifar10(&dir, per_batch, test_n, seed)?
                }
                other => anyhow::bail!("unknown dataset {other:?}"),
            }
            println!("wrote synthetic {dataset} files to {}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
