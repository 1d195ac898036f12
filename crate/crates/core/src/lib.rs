//! Diffusion rejection sampling on analytic Gaussian-mixture diffusions.
//!
//! A discrete variance-preserving diffusion whose "pre-trained" model is a
//! Gaussian mixture `p_0^θ` that differs from the data mixture `q_0`. Every
//! marginal and reverse posterior is available in closed form, so the
//! rejection sampler can run against exact density ratios as well as against
//! a trained time-conditioned discriminator.
//!
//! Module map:
//! - [`benchmark`]: the reference 1D and 2D problems.
//! - [`gmm`]: mixture densities, forward marginals, reverse posteriors.
//! - [`schedule`], [`diffusion`]: the VP chain, model kernels, base sampler.
//! - [`discriminator`]: the time-conditioned classifier and its training.
//! - [`ratio`]: density-ratio estimators (oracle, discriminator, constant).
//! - [`rejection`]: acceptance rule, calibration, the sequential sampler.
//! - [`eval`]: bound estimators, sample distances, run summaries.

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod benchmark;
pub mod diffusion;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod gmm;
mod linalg;
pub mod ratio;
pub mod rejection;
pub mod rng;
pub mod schedule;
pub mod stats;

pub use diffusion::{
    base_sample, ChainRecord, DiffusionModel, Event, EventKind, KernelMode, ModelError,
    VarianceRule,
};
pub use discriminator::{
    train_discriminator, DiscriminatorModel, LambdaRule, TimeEmbedding, TrainConfig, TrainReport,
    TrainingExample,
};
pub use error::{Error, Result};
pub use eval::{
    energy_distance, energy_test, estimate_j, estimate_r, sliced_wasserstein, summarize_run,
    BoundEstimate, RunSummary,
};
pub use gmm::{
    forward_marginal, oracle_log_ratio, reverse_posterior, Component, GaussianMixture, LogRatio,
    MixtureDiffusion,
};
pub use linalg::log_sum_exp;
pub use ratio::{
    ConstantEstimator, DiscriminatorEstimator, OracleEstimator, PriorReference, RatioEstimator,
};
pub use rejection::{
    acceptance_prob, calibrate_constants, diffrs_sample, final_samples, Calibration, ChainState,
    RejectionConstants, SampleOptions, Sampler, Strategy,
};
pub use rng::{chain_rng, derive_seed, DecisionRng, Entropy, StreamRng};
pub use schedule::{make_vp_schedule, BetaRule, NoiseSchedule};
