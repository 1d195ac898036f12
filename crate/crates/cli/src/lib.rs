//! Experiment driver for diffusion rejection sampling: configuration, the
//! train → calibrate → sample → evaluate pipeline, and its output files.

pub mod artifacts;
pub mod config;
pub mod pipeline;

pub use artifacts::{Manifest, MetricsRow, SweepRow};
pub use config::{parse_config, ConfigError, EstimatorMode, ExperimentConfig, TargetSpec};
pub use pipeline::{execute, Command, Experiment, PipelineError, RunOutcome, Stage};

/// Sizes the global worker pool from `DIFFRS_THREADS`, when set.
pub fn init_thread_pool() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("DIFFRS_THREADS") {
        let threads: usize = value
            .parse()
            .map_err(|_| anyhow::anyhow!("DIFFRS_THREADS={value:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    Ok(())
}
