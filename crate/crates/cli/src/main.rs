use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffrs_cli::{execute, parse_config, Command, EstimatorMode, ExperimentConfig};
use diffrs_core::Strategy;

#[derive(Parser)]
#[command(
    name = "diffrs",
    version,
    about = "Diffusion rejection sampling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Write the data and model mixtures and the q0 reference sets.
    GenData(Overrides),
    /// Train the time-conditioned discriminator.
    TrainDisc(Overrides),
    /// Compute rejection constants.
    Calibrate(Overrides),
    /// Sample with every configured strategy.
    Sample(Overrides),
    /// Estimate the J and R bounds.
    Eval(Overrides),
    /// Run the whole pipeline.
    Run(Overrides),
    /// Run all sampling strategies (or the ones given with --strategy).
    Ablate(Overrides),
    /// Sweep the calibration percentile.
    SweepGamma(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (TOML). Without it, the default benchmark is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling strategy; repeat for several.
    #[arg(long = "strategy")]
    strategies: Vec<Strategy>,
    /// Calibration percentile in [0, 100].
    #[arg(long)]
    gamma: Option<f64>,
    /// Ratio estimator: oracle or disc.
    #[arg(long)]
    estimator: Option<EstimatorMode>,
}

impl Overrides {
    fn resolve(self, command: Command) -> anyhow::Result<ExperimentConfig> {
        let mut config = match (&self.config, self.seed) {
            (Some(path), _) => parse_config(path)?,
            (None, Some(seed)) => ExperimentConfig::with_seed(seed),
            (None, None) => anyhow::bail!("missing `seed`: pass --seed or a --config that sets it"),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = self.out {
            config.out_dir = out;
        }
        if let Some(gamma) = self.gamma {
            config.sampling.gamma = gamma;
        }
        if let Some(mode) = self.estimator {
            config.estimator.mode = mode;
        }
        if !self.strategies.is_empty() {
            config.sampling.strategies = self.strategies;
        } else if command == Command::Ablate {
            config.sampling.strategies = Strategy::ALL.to_vec();
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, overrides) = match cli.command {
        Sub::GenData(o) => (Command::GenData, o),
        Sub::TrainDisc(o) => (Command::TrainDisc, o),
        Sub::Calibrate(o) => (Command::Calibrate, o),
        Sub::Sample(o) => (Command::Sample, o),
        Sub::Eval(o) => (Command::Eval, o),
        Sub::Run(o) => (Command::Run, o),
        Sub::Ablate(o) => (Command::Ablate, o),
        Sub::SweepGamma(o) => (Command::SweepGamma, o),
    };
    let result = diffrs_cli::init_thread_pool()
        .and_then(|()| overrides.resolve(command))
        .and_then(|config| Ok(execute(&config, command)?));
    match result {
        Ok(outcome) => {
            for row in &outcome.metrics {
                println!(
                    "seed {} {:>18} γ={:<5} nfe {:>8.2}  sw {:.4}  energy {:.4}",
                    row.seed, row.strategy, row.gamma, row.mean_nfe, row.sw_dist, row.energy_dist
                );
            }
            println!("wrote {}", outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
