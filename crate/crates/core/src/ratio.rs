//! Density-ratio estimators `L̂_t(x) ≈ q_t(x) / p_t^θ(x)`.
//!
//! Two ratios are involved in sampling. The marginal ratio at `t ∈ 0..=T` drives
//! every transition and re-initialization test. The terminal *prior* ratio
//! `q_T / p_T` drives the prior rejection loop, where `p_T` is what the sampler
//! actually draws from. For the oracle, `p_T` defaults to `N(0, I)`.

use serde::{Deserialize, Serialize};

use crate::discriminator::{DiscriminatorModel, LOGIT_CLAMP};
use crate::error::{Error, Result};
use crate::gmm::{forward_marginal, oracle_log_ratio, GaussianMixture, LogRatio};
use crate::schedule::NoiseSchedule;

/// Which density plays `p_T` in the terminal prior ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorReference {
    /// The prior the sampler draws from.
    #[default]
    StandardNormal,
    /// The model's own forward marginal `p_T^θ`.
    ModelMarginal,
}

pub trait RatioEstimator: Sync {
    /// `log L̂_t(x)` for `0 ≤ t ≤ T`.
    fn log_ratio(&self, x: &[f64], t: usize) -> Result<LogRatio>;

    /// `log q_T(x) / p_T(x)` for a prior draw. Defaults to the marginal ratio at `T`.
    fn log_prior_ratio(&self, x: &[f64]) -> Result<LogRatio> {
        self.log_ratio(x, self.steps())
    }

    /// Number of diffusion steps `T` the estimator covers.
    fn steps(&self) -> usize;

    /// Short label used in reports.
    fn mode(&self) -> &'static str;
}

/// Exact ratios from the closed-form forward marginals of `q_0` and `p_0^θ`.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    q: Vec<GaussianMixture>,
    p: Vec<GaussianMixture>,
    prior: PriorReference,
    standard_normal: GaussianMixture,
}

impl OracleEstimator {
    pub fn new(
        q0: &GaussianMixture,
        p0: &GaussianMixture,
        schedule: &NoiseSchedule,
        prior: PriorReference,
    ) -> Result<Self> {
        if q0.dim() != p0.dim() {
            return Err(Error::DimensionMismatch {
                expected: q0.dim(),
                got: p0.dim(),
            });
        }
        let marginals = |g: &GaussianMixture| {
            (0..=schedule.steps())
                .map(|t| forward_marginal(g, schedule, t))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            q: marginals(q0)?,
            p: marginals(p0)?,
            prior,
            standard_normal: GaussianMixture::standard_normal(q0.dim()),
        })
    }

    pub fn prior_reference(&self) -> PriorReference {
        self.prior
    }

    pub fn q_marginal(&self, t: usize) -> &GaussianMixture {
        &self.q[t]
    }

    pub fn p_marginal(&self, t: usize) -> &GaussianMixture {
        &self.p[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.q.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 0,
                max: self.q.len() - 1,
            });
        }
        Ok(())
    }
}

impl RatioEstimator for OracleEstimator {
    fn log_ratio(&self, x: &[f64], t: usize) -> Result<LogRatio> {
        self.check_t(t)?;
        oracle_log_ratio(&self.q[t], &self.p[t], x)
    }

    fn log_prior_ratio(&self, x: &[f64]) -> Result<LogRatio> {
        let steps = self.steps();
        match self.prior {
            PriorReference::StandardNormal => {
                oracle_log_ratio(&self.q[steps], &self.standard_normal, x)
            }
            PriorReference::ModelMarginal => self.log_ratio(x, steps),
        }
    }

    fn steps(&self) -> usize {
        self.q.len() - 1
    }

    fn mode(&self) -> &'static str {
        "oracle"
    }
}

/// `L̂_t = exp(z_t)` from a trained discriminator, with `z` clamped to `±LOGIT_CLAMP`.
///
/// The discriminator only ever sees `p_T^θ` as its fake stream, so its prior
/// ratio is the marginal one at `T`.
#[derive(Debug, Clone)]
pub struct DiscriminatorEstimator {
    model: DiscriminatorModel,
    schedule: NoiseSchedule,
}

impl DiscriminatorEstimator {
    pub fn new(model: DiscriminatorModel, schedule: NoiseSchedule) -> Self {
        Self { model, schedule }
    }

    pub fn model(&self) -> &DiscriminatorModel {
        &self.model
    }
}

impl RatioEstimator for DiscriminatorEstimator {
    fn log_ratio(&self, x: &[f64], t: usize) -> Result<LogRatio> {
        let z = self.model.logit(x, t, &self.schedule)?;
        Ok(LogRatio::new(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
    }

    fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn mode(&self) -> &'static str {
        "disc"
    }
}

/// The same ratio everywhere; `ConstantEstimator::trivial(T)` is `L̂ ≡ 1`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEstimator {
    log_value: LogRatio,
    steps: usize,
}

impl ConstantEstimator {
    pub fn new(log_value: f64, steps: usize) -> Self {
        Self {
            log_value: LogRatio::new(log_value),
            steps,
        }
    }

    pub fn trivial(steps: usize) -> Self {
        Self::new(0.0, steps)
    }
}

impl RatioEstimator for ConstantEstimator {
    fn log_ratio(&self, _x: &[f64], t: usize) -> Result<LogRatio> {
        if t > self.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 0,
                max: self.steps,
            });
        }
        Ok(self.log_value)
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn mode(&self) -> &'static str {
        "constant"
    }
}
