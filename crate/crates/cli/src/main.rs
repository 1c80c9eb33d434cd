//! Command-line experiment runner for the federated imbalance simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::experiment::{self, ConfigOverrides};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulator for imbalanced binary diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, seed) pair from a config file and write CSV
    /// traces, per-run reports and a cross-seed summary.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides FEDSIM_OUT and the config value.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds overriding the config, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Run only this strategy (fedavg | fedprox | fedloss).
        #[arg(long)]
        strategy: Option<String>,
        /// Training setting (randomly | chronologically).
        #[arg(long)]
        setting: Option<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, out, seeds, strategy, setting } => {
            let output_dir = out.or_else(|| std::env::var_os("FEDSIM_OUT").map(PathBuf::from));
            let overrides = ConfigOverrides { output_dir, seeds, strategy, setting };
            let cfg = experiment::parse_config_with_overrides(&config, &overrides)?;
            log::info!(
                "running {} strategies x {} seeds ({} setting) into {}",
                cfg.strategies.len(),
                cfg.seeds.len(),
                cfg.setting.name(),
                cfg.output_dir.display()
            );
            let outcome = experiment::run_experiment(&cfg)?;
            print!("{}", std::fs::read_to_string(&outcome.summary_path)?);
            println!("wrote {} runs to {}", outcome.runs.len(), cfg.output_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
