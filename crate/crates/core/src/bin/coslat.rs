//! Command-line front end: run Monte Carlo experiments, check configuration
//! files and replay experiments on a stored ground truth.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coslat::harness::{self, HarnessError, MethodSelection, Mode, RmseCurves, SimConfig};
use coslat::scenario::{ScenarioConfig, Truth};

#[derive(Parser)]
#[command(name = "coslat", version, about = "Cooperative self-localization and tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write rmse.csv, runs.csv and truth.csv.
    Simulate(RunArgs),
    /// Parse and check a configuration file.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an experiment on the ground truth stored in a truth CSV.
    Replay {
        #[arg(long)]
        truth: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; the built-in network is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    scenario: Option<u8>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Coslat,
    Baseline,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    DistributedLc,
    Centralized,
    ExactExtrinsic,
}

impl RunArgs {
    fn config(&self) -> Result<SimConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => SimConfig::load(path)?,
            None => SimConfig::default(),
        };
        if let Some(s) = self.scenario {
            if self.config.is_some() {
                cfg.scenario.scenario = s;
            } else {
                cfg.scenario = ScenarioConfig::reference_network(s);
            }
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.method = match m {
                MethodArg::Coslat => MethodSelection::Coslat,
                MethodArg::Baseline => MethodSelection::Baseline,
                MethodArg::Both => MethodSelection::Both,
            };
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::DistributedLc => Mode::DistributedLc,
                ModeArg::Centralized => Mode::Centralized,
                ModeArg::ExactExtrinsic => Mode::ExactExtrinsic,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn summarize(curves: &[RmseCurves], steps: usize) {
    for c in curves {
        println!(
            "{:<8} runs {:>3} (excluded {:>2})  self-loc RMSE mean {:.3}  tracking RMSE mean {:.3}",
            c.method.as_str(),
            c.included_runs,
            c.excluded_runs,
            RmseCurves::window_mean(&c.selfloc, 1, steps),
            RmseCurves::window_mean(&c.track, 1, steps),
        );
    }
}

fn execute(cfg: &SimConfig, truth: Option<Truth>, out: &Path) -> Result<(), HarnessError> {
    let exp = match truth {
        Some(t) => harness::run_experiment_with_truth(cfg, t)?,
        None => harness::run_experiment(cfg)?,
    };
    let curves = harness::export_csv(&exp, out)?;
    summarize(&curves, cfg.scenario.steps);
    println!("wrote {}", out.display());
    Ok(())
}

fn load_truth(path: &Path) -> Result<Truth, HarnessError> {
    let f = File::open(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Truth::read_csv(f)?)
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate(args) => execute(&args.config()?, None, &args.out),
        Command::ValidateConfig { config } => {
            let cfg = SimConfig::load(&config)?;
            println!(
                "{}: ok (scenario {}, {} sensors, {} steps, {} runs)",
                config.display(),
                cfg.scenario.scenario,
                cfg.scenario.num_sensors(),
                cfg.scenario.steps,
                cfg.runs
            );
            Ok(())
        }
        Command::Replay { truth, run } => execute(&run.config()?, Some(load_truth(&truth)?), &run.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
