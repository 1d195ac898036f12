//! Closed-form marginals and reverse posteriors of a Gaussian mixture pushed
//! through the discrete VP forward chain.

use crate::error::{Error, Result};
use crate::gmm::mixture::{Component, GaussianMixture, LOG_DENSITY_FLOOR};
use crate::linalg::{self, Cholesky};
use crate::rng::Entropy;
use crate::schedule::NoiseSchedule;

/// Marginal `q_t` of `x_t` when `x_0 ~ gmm0`.
///
/// Each component `(w, μ, Σ)` maps to `(w, √ᾱ_t μ, ᾱ_t Σ + (1-ᾱ_t) I)`.
pub fn forward_marginal(
    gmm0: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<GaussianMixture> {
    schedule.check_t(t, 0, schedule.steps())?;
    if t == 0 {
        return Ok(gmm0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (scale, d) = (ab.sqrt(), gmm0.dim());
    let components = gmm0
        .components()
        .iter()
        .map(|c| {
            let mut cov: Vec<f64> = c.cov.iter().map(|v| ab * v).collect();
            linalg::add_diagonal(&mut cov, d, 1.0 - ab);
            Component::new(c.weight, c.mean.iter().map(|m| scale * m).collect(), cov)
        })
        .collect();
    GaussianMixture::with_regularization(d, components, gmm0.regularization())
}

/// Exact posterior of `x_t` given `x_{t+1} = x_next` when `x_0 ~ gmm0`.
pub fn reverse_posterior(
    gmm0: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: usize,
    x_next: &[f64],
) -> Result<GaussianMixture> {
    schedule.check_t(t, 0, schedule.steps() - 1)?;
    gmm0.check_dim(x_next)?;
    let marginal = forward_marginal(gmm0, schedule, t)?;
    PosteriorStep::new(&marginal, schedule, t)?.posterior(x_next)
}

#[derive(Debug, Clone)]
struct PosteriorComponent {
    log_weight: f64,
    /// Pushforward at `t + 1`, used for responsibilities.
    next_mean: Vec<f64>,
    next_chol: Cholesky,
    /// Posterior mean is `offset + gain · x_next`.
    offset: Vec<f64>,
    gain: Vec<f64>,
    cov: Vec<f64>,
    chol: Cholesky,
}

/// Precomputed conjugate-update pieces for one reverse step `t+1 → t`.
#[derive(Debug, Clone)]
pub(crate) struct PosteriorStep {
    dim: usize,
    components: Vec<PosteriorComponent>,
}

impl PosteriorStep {
    /// `marginal` is the forward marginal at `t`.
    fn new(marginal: &GaussianMixture, schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        let beta = schedule.beta(t + 1);
        if beta <= 0.0 {
            return Err(Error::DegenerateKernel { t_next: t + 1 });
        }
        let d = marginal.dim();
        let a = (1.0 - beta).sqrt();
        let reg = marginal.regularization();
        let mut components = Vec::new();
        for (i, c) in marginal.components().iter().enumerate() {
            if c.weight == 0.0 {
                continue;
            }
            let mut prior_cov = c.cov.clone();
            linalg::add_diagonal(&mut prior_cov, d, reg);
            let prior =
                Cholesky::new(&prior_cov, d).ok_or(Error::SingularCovariance { component: i })?;
            // posterior precision = Σ⁻¹ + (a²/β) I
            let mut precision = prior.inverse();
            linalg::add_diagonal(&mut precision, d, a * a / beta);
            let mut cov = Cholesky::new(&precision, d)
                .ok_or(Error::SingularCovariance { component: i })?
                .inverse();
            linalg::symmetrize(&mut cov, d);
            let chol = Cholesky::new(&cov, d).ok_or(Error::SingularCovariance { component: i })?;
            let offset = linalg::mat_vec(&cov, d, &prior.solve(&c.mean));
            let gain: Vec<f64> = cov.iter().map(|v| v * a / beta).collect();

            let next_mean: Vec<f64> = c.mean.iter().map(|m| a * m).collect();
            let mut next_cov: Vec<f64> = c.cov.iter().map(|v| a * a * v).collect();
            linalg::add_diagonal(&mut next_cov, d, beta + reg);
            let next_chol =
                Cholesky::new(&next_cov, d).ok_or(Error::SingularCovariance { component: i })?;
            components.push(PosteriorComponent {
                log_weight: c.weight.ln(),
                next_mean,
                next_chol,
                offset,
                gain,
                cov,
                chol,
            });
        }
        Ok(Self { dim: d, components })
    }

    fn log_responsibilities(&self, x_next: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                c.log_weight
                    + c.next_chol
                        .log_normal_density(x_next, &c.next_mean)
                        .max(LOG_DENSITY_FLOOR)
            })
            .collect();
        let norm = linalg::log_sum_exp(&logs);
        logs.into_iter().map(|l| l - norm).collect()
    }

    fn mean(&self, c: &PosteriorComponent, x_next: &[f64]) -> Vec<f64> {
        let g = linalg::mat_vec(&c.gain, self.dim, x_next);
        c.offset.iter().zip(g).map(|(o, g)| o + g).collect()
    }

    fn posterior(&self, x_next: &[f64]) -> Result<GaussianMixture> {
        let resp = self.log_responsibilities(x_next);
        let components = self
            .components
            .iter()
            .zip(&resp)
            .map(|(c, r)| Component::new(r.exp(), self.mean(c, x_next), c.cov.clone()))
            .collect();
        // posterior covariances are bounded below by the kernel noise; no ridge needed
        GaussianMixture::with_regularization(self.dim, components, 0.0)
    }

    fn log_density_given(&self, resp: &[f64], x_next: &[f64], x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(resp)
            .map(|(c, r)| {
                r + c
                    .chol
                    .log_normal_density(x, &self.mean(c, x_next))
                    .max(LOG_DENSITY_FLOOR)
            })
            .collect();
        linalg::log_sum_exp(&terms)
    }

    fn log_density(&self, x_next: &[f64], x: &[f64]) -> f64 {
        self.log_density_given(&self.log_responsibilities(x_next), x_next, x)
    }

    fn sample<E: Entropy + ?Sized>(&self, x_next: &[f64], rng: &mut E) -> (Vec<f64>, f64) {
        let resp = self.log_responsibilities(x_next);
        let k = if self.components.len() == 1 {
            0
        } else {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (i, r) in resp.iter().enumerate() {
                acc += r.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let c = &self.components[k];
        let z = rng.standard_normal_vec(self.dim);
        let x = c.chol.transform(&self.mean(c, x_next), &z);
        let lp = self.log_density_given(&resp, x_next, &x);
        (x, lp)
    }
}

/// All forward marginals and reverse posterior steps of a mixture under a schedule.
#[derive(Debug, Clone)]
pub struct MixtureDiffusion {
    schedule: NoiseSchedule,
    marginals: Vec<GaussianMixture>,
    steps: Vec<Option<PosteriorStep>>,
}

impl MixtureDiffusion {
    pub fn new(gmm0: &GaussianMixture, schedule: &NoiseSchedule) -> Result<Self> {
        let marginals = (0..=schedule.steps())
            .map(|t| forward_marginal(gmm0, schedule, t))
            .collect::<Result<Vec<_>>>()?;
        let steps = (0..schedule.steps())
            .map(|t| match PosteriorStep::new(&marginals[t], schedule, t) {
                Ok(s) => Ok(Some(s)),
                Err(Error::DegenerateKernel { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schedule: schedule.clone(),
            marginals,
            steps,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.marginals[0].dim()
    }

    /// The data distribution this diffusion starts from.
    pub fn base(&self) -> &GaussianMixture {
        &self.marginals[0]
    }

    /// Forward marginal at `0 ≤ t ≤ T`.
    pub fn marginal(&self, t: usize) -> &GaussianMixture {
        &self.marginals[t]
    }

    fn step(&self, t: usize) -> Result<&PosteriorStep> {
        self.schedule.check_t(t, 0, self.schedule.steps() - 1)?;
        self.steps[t]
            .as_ref()
            .ok_or(Error::DegenerateKernel { t_next: t + 1 })
    }

    /// Reverse posterior `q_{t|t+1}(· | x_next)` as a mixture.
    pub fn posterior(&self, t: usize, x_next: &[f64]) -> Result<GaussianMixture> {
        self.marginals[0].check_dim(x_next)?;
        self.step(t)?.posterior(x_next)
    }

    /// `log q_{t|t+1}(x_t | x_next)`.
    pub fn posterior_log_density(&self, t: usize, x_next: &[f64], x_t: &[f64]) -> Result<f64> {
        self.marginals[0].check_dim(x_next)?;
        self.marginals[0].check_dim(x_t)?;
        Ok(self.step(t)?.log_density(x_next, x_t))
    }

    /// Draws from `q_{t|t+1}(· | x_next)` and reports the draw's log density.
    pub fn sample_posterior<E: Entropy + ?Sized>(
        &self,
        t: usize,
        x_next: &[f64],
        rng: &mut E,
    ) -> Result<(Vec<f64>, f64)> {
        self.marginals[0].check_dim(x_next)?;
        Ok(self.step(t)?.sample(x_next, rng))
    }
}
