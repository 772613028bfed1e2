//! Command-line surface: configuration, running, result files.

pub mod config;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::cycle;
use crate::error::Result;
use crate::oracle::OracleMode;

pub use config::{parse_config, DatasetKind, ExperimentConfig, Overrides};
pub use report::emit_results;

#[derive(Debug, Parser)]
#[command(
    name = "daic",
    version,
    about = "Assessment and improvement cycle for a deployed digit classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    #[value(name = "dnn_os", alias = "dnn-os")]
    DnnOs,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Mnist,
    Synthetic,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment and write result files.
    Run(RunArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleArg>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    #[arg(long)]
    pub mnist_images: Option<PathBuf>,
    #[arg(long)]
    pub mnist_labels: Option<PathBuf>,
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            cycles: self.cycles,
            repetitions: self.repetitions,
            oracle: self.oracle.map(|o| match o {
                OracleArg::DnnOs => OracleMode::DnnOs,
                OracleArg::Baseline => OracleMode::Baseline,
            }),
            seed: self.seed,
            out: self.out.clone(),
            dataset: self.dataset.map(|d| match d {
                DatasetArg::Mnist => DatasetKind::Mnist,
                DatasetArg::Synthetic => DatasetKind::Synthetic,
            }),
            mnist_images: self.mnist_images.clone(),
            mnist_labels: self.mnist_labels.clone(),
        }
    }
}

/// Parses the config, runs every repetition and writes the result files.
pub fn run(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let config = parse_config(args.config.as_deref(), &args.overrides())?;
    let started = Instant::now();
    let output = cycle::run_experiment(&config)?;
    emit_results(
        &output.records,
        &output.rule_snapshots,
        &config,
        started.elapsed(),
        &config.output.dir,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_run_flags() {
        let cli = Cli::try_parse_from([
            "daic",
            "run",
            "--cycles",
            "3",
            "--oracle",
            "baseline",
            "--dataset",
            "synthetic",
            "--seed",
            "9",
        ])
        .unwrap();
        let Command::Run(args) = cli.command;
        let o = args.overrides();
        assert_eq!(o.cycles, Some(3));
        assert_eq!(o.oracle, Some(OracleMode::Baseline));
        assert_eq!(o.dataset, Some(DatasetKind::Synthetic));
        assert_eq!(o.seed, Some(9));
        assert!(Cli::try_parse_from(["daic", "run", "--oracle", "majority_vote"]).is_err());
        for spelling in ["dnn_os", "dnn-os"] {
            let Command::Run(args) = Cli::try_parse_from(["daic", "run", "--oracle", spelling])
                .unwrap()
                .command;
            assert_eq!(args.overrides().oracle, Some(OracleMode::DnnOs));
        }
    }
}
