//! The two reference problems used by tests, benches and the experiment driver.

use crate::diffusion::{DiffusionModel, ModelError};
use crate::error::Result;
use crate::gmm::{Component, GaussianMixture};
use crate::ratio::{OracleEstimator, PriorReference};
use crate::schedule::{make_vp_schedule, BetaRule, NoiseSchedule};

/// A data mixture, a perturbed model mixture and the schedule they share.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub q0: GaussianMixture,
    pub p0: GaussianMixture,
    pub schedule: NoiseSchedule,
}

impl Benchmark {
    pub fn new(
        q0: GaussianMixture,
        model_error: &ModelError,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        let p0 = model_error.apply(&q0)?;
        Ok(Self { q0, p0, schedule })
    }

    /// The model with exact reverse kernels.
    pub fn model(&self) -> Result<DiffusionModel> {
        DiffusionModel::exact(&self.p0, &self.schedule)
    }

    pub fn oracle(&self) -> Result<OracleEstimator> {
        OracleEstimator::new(
            &self.q0,
            &self.p0,
            &self.schedule,
            PriorReference::StandardNormal,
        )
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }
}

/// Eight equal-weight modes on a circle of radius 2 (sd 0.3), model shifted by
/// `(0.5, 0)`, 32 linear steps from 1e-3 to 0.25.
pub fn ring_2d() -> Result<Benchmark> {
    Benchmark::new(
        GaussianMixture::ring(8, 2.0, 0.09)?,
        &ModelError::shift(vec![0.5, 0.0]),
        make_vp_schedule(32, 1e-3, 0.25, BetaRule::Linear)?,
    )
}

/// `0.3·N(-1, 0.2) + 0.7·N(1, 0.1)`, model shifted by 0.5, 4 linear steps from 0.05 to 0.4.
pub fn bimodal_1d() -> Result<Benchmark> {
    Benchmark::new(
        GaussianMixture::new(
            1,
            vec![
                Component::isotropic(0.3, vec![-1.0], 0.2),
                Component::isotropic(0.7, vec![1.0], 0.1),
            ],
        )?,
        &ModelError::shift(vec![0.5]),
        make_vp_schedule(4, 0.05, 0.4, BetaRule::Linear)?,
    )
}
