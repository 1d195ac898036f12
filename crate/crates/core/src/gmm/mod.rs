//! Exact probability computations for Gaussian mixtures under the VP forward
//! process. These are the analytic ground truth for everything else.

mod mixture;
mod posterior;

pub use mixture::{
    oracle_log_ratio, Component, GaussianMixture, LogRatio, DEFAULT_REGULARIZATION,
    LOG_DENSITY_FLOOR,
};
pub use posterior::{forward_marginal, reverse_posterior, MixtureDiffusion};
