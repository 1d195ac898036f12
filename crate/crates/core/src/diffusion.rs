//! The "pre-trained" model: a Gaussian-mixture `p_0^θ` with its reverse
//! transition kernel, and the plain ancestral sampler.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{Component, GaussianMixture, LogRatio, MixtureDiffusion};
use crate::linalg::LN_2PI;
use crate::rng::{chain_rng, Entropy};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    /// Sample the exact reverse posterior of `p_0^θ`.
    #[default]
    ExactReverse,
    /// `N(μ^θ, σ² I)` built from the analytic score of `p_{t+1}^θ`.
    GaussianApprox,
}

/// Variance of the Gaussian kernel in [`KernelMode::GaussianApprox`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceRule {
    /// `σ²_{t+1} = β_{t+1}`.
    #[default]
    Beta,
    /// `σ²_{t+1} = β_{t+1} (1 - ᾱ_t) / (1 - ᾱ_{t+1})`, with `β_1` at `t = 0`.
    PosteriorMatched,
}

/// Controlled gap between the data distribution and the model's `p_0^θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelError {
    /// Added to every component mean. Empty means no shift.
    pub mean_shift: Vec<f64>,
    /// Weights are rescaled by `1 + ε` on even and `1 - ε` on odd components, then renormalized.
    pub weight_perturbation: f64,
    /// Multiplies every covariance.
    pub cov_scale: f64,
}

impl Default for ModelError {
    fn default() -> Self {
        Self {
            mean_shift: Vec::new(),
            weight_perturbation: 0.0,
            cov_scale: 1.0,
        }
    }
}

impl ModelError {
    pub fn shift(mean_shift: Vec<f64>) -> Self {
        Self {
            mean_shift,
            ..Self::default()
        }
    }

    pub fn apply(&self, q0: &GaussianMixture) -> Result<GaussianMixture> {
        let d = q0.dim();
        if !self.mean_shift.is_empty() && self.mean_shift.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.mean_shift.len(),
            });
        }
        if !(self.weight_perturbation.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "weight perturbation {} must lie in (-1, 1)",
                self.weight_perturbation
            )));
        }
        if !(self.cov_scale > 0.0 && self.cov_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "covariance scale {} must be positive",
                self.cov_scale
            )));
        }
        let components = q0
            .components()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let mean = if self.mean_shift.is_empty() {
                    c.mean.clone()
                } else {
                    c.mean
                        .iter()
                        .zip(&self.mean_shift)
                        .map(|(m, s)| m + s)
                        .collect()
                };
                Component::new(
                    c.weight * (1.0 + sign * self.weight_perturbation),
                    mean,
                    c.cov.iter().map(|v| v * self.cov_scale).collect(),
                )
            })
            .collect();
        GaussianMixture::normalized(d, components)
    }
}

/// A diffusion model whose implied data distribution is the mixture `p_0^θ`.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    diffusion: MixtureDiffusion,
    kernel_mode: KernelMode,
    variance_rule: VarianceRule,
}

impl DiffusionModel {
    pub fn new(
        p0: &GaussianMixture,
        schedule: &NoiseSchedule,
        kernel_mode: KernelMode,
        variance_rule: VarianceRule,
    ) -> Result<Self> {
        Ok(Self {
            diffusion: MixtureDiffusion::new(p0, schedule)?,
            kernel_mode,
            variance_rule,
        })
    }

    /// Exact-reverse model with default settings.
    pub fn exact(p0: &GaussianMixture, schedule: &NoiseSchedule) -> Result<Self> {
        Self::new(p0, schedule, KernelMode::ExactReverse, VarianceRule::Beta)
    }

    pub fn p0(&self) -> &GaussianMixture {
        self.diffusion.base()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.diffusion.schedule()
    }

    pub fn steps(&self) -> usize {
        self.schedule().steps()
    }

    pub fn dim(&self) -> usize {
        self.diffusion.dim()
    }

    pub fn kernel_mode(&self) -> KernelMode {
        self.kernel_mode
    }

    pub fn variance_rule(&self) -> VarianceRule {
        self.variance_rule
    }

    /// Forward marginals `p_t^θ` of the model's data distribution.
    pub fn diffusion(&self) -> &MixtureDiffusion {
        &self.diffusion
    }

    fn gaussian_kernel(&self, t: usize, x_next: &[f64]) -> Result<(Vec<f64>, f64)> {
        let s = self.schedule();
        let beta = s.beta(t + 1);
        if beta <= 0.0 {
            return Err(Error::DegenerateKernel { t_next: t + 1 });
        }
        let score = self.diffusion.marginal(t + 1).score(x_next)?;
        let scale = 1.0 / (1.0 - beta).sqrt();
        let mean = x_next
            .iter()
            .zip(&score)
            .map(|(x, g)| scale * (x + beta * g))
            .collect();
        let var = match self.variance_rule {
            VarianceRule::Beta => beta,
            VarianceRule::PosteriorMatched if t == 0 => beta,
            VarianceRule::PosteriorMatched => {
                beta * (1.0 - s.alpha_bar(t)) / (1.0 - s.alpha_bar(t + 1))
            }
        };
        Ok((mean, var))
    }

    /// Draws `x_t ~ p^θ_{t|t+1}(· | x_next)` and returns it with its log density.
    pub fn model_transition<E: Entropy + ?Sized>(
        &self,
        t: usize,
        x_next: &[f64],
        rng: &mut E,
    ) -> Result<(Vec<f64>, f64)> {
        self.schedule().check_t(t, 0, self.steps() - 1)?;
        self.p0().check_dim(x_next)?;
        match self.kernel_mode {
            KernelMode::ExactReverse => self.diffusion.sample_posterior(t, x_next, rng),
            KernelMode::GaussianApprox => {
                let (mean, var) = self.gaussian_kernel(t, x_next)?;
                let sd = var.sqrt();
                let x: Vec<f64> = mean
                    .iter()
                    .map(|m| m + sd * rng.standard_normal())
                    .collect();
                let lp = isotropic_log_density(&x, &mean, var);
                Ok((x, lp))
            }
        }
    }

    /// `log p^θ_{t|t+1}(x_t | x_next)`.
    pub fn transition_log_density(&self, t: usize, x_next: &[f64], x_t: &[f64]) -> Result<f64> {
        self.schedule().check_t(t, 0, self.steps() - 1)?;
        match self.kernel_mode {
            KernelMode::ExactReverse => self.diffusion.posterior_log_density(t, x_next, x_t),
            KernelMode::GaussianApprox => {
                self.p0().check_dim(x_t)?;
                let (mean, var) = self.gaussian_kernel(t, x_next)?;
                Ok(isotropic_log_density(x_t, &mean, var))
            }
        }
    }

    /// Full ancestral trajectory; element `t` is `x_t`, so index `T` is the prior draw.
    pub fn sample_trajectory<E: Entropy + ?Sized>(&self, rng: &mut E) -> Result<Vec<Vec<f64>>> {
        let steps = self.steps();
        let mut states = vec![Vec::new(); steps + 1];
        states[steps] = rng.standard_normal_vec(self.dim());
        for t in (0..steps).rev() {
            states[t] = self.model_transition(t, &states[t + 1], rng)?.0;
        }
        Ok(states)
    }

    /// Runs one base chain from the prior to `t = 0`.
    pub(crate) fn run_base_chain<E: Entropy + ?Sized>(
        &self,
        record: &mut ChainRecord,
        rng: &mut E,
    ) -> Result<()> {
        let mut x = rng.standard_normal_vec(self.dim());
        record.log(self.steps(), EventKind::Propose, None);
        record.log(self.steps(), EventKind::Accept, None);
        for t in (0..self.steps()).rev() {
            x = self.model_transition(t, &x, rng)?.0;
            record.nfe_model += 1;
            record.attempt_nfe += 1;
            record.log(t, EventKind::Propose, None);
            record.log(t, EventKind::Accept, None);
        }
        record.x = x;
        record.t = 0;
        Ok(())
    }
}

fn isotropic_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
    -0.5 * (d * (LN_2PI + var.ln()) + sq / var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Propose,
    Accept,
    Reject,
    ReinitFwd,
    ReinitAccept,
    Restart,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Propose => "propose",
            EventKind::Accept => "accept",
            EventKind::Reject => "reject",
            EventKind::ReinitFwd => "reinit_fwd",
            EventKind::ReinitAccept => "reinit_accept",
            EventKind::Restart => "restart",
        }
    }
}

/// One entry of a chain's sampling log.
///
/// For a `Reject`, `depth` is how many timesteps the chain moved back up before
/// descending again (zero for a rejected prior draw). `log_l` is absent when
/// no ratio was evaluated, as in plain ancestral steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: usize,
    pub kind: EventKind,
    pub log_l: Option<f64>,
    pub depth: usize,
}

/// State and bookkeeping of one sampling chain.
///
/// Counters are always kept; the event log itself can be switched off for
/// long runs with [`without_events`](Self::without_events).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub chain_id: usize,
    pub x: Vec<f64>,
    pub t: usize,
    pub log_l: LogRatio,
    /// Model transition evaluations over the chain's whole life.
    pub nfe_model: usize,
    /// Model transition evaluations since the last restart.
    pub attempt_nfe: usize,
    /// Ratio-estimator evaluations.
    pub nfe_disc: usize,
    pub restarts: usize,
    /// Accept/reject decisions taken.
    pub tests: usize,
    /// Decisions whose raw acceptance probability exceeded one.
    pub violations: usize,
    /// Proposals per timestep `0..=T` (prior draws count at `T`).
    pub proposed: Vec<usize>,
    /// Accepted proposals per timestep.
    pub accepted: Vec<usize>,
    /// Rejections by depth; see [`Event`].
    pub reject_depths: Vec<usize>,
    pub events: Vec<Event>,
    keep_events: bool,
}

impl ChainRecord {
    pub fn new(chain_id: usize, steps: usize) -> Self {
        Self {
            chain_id,
            x: Vec::new(),
            t: steps,
            log_l: LogRatio::ONE,
            nfe_model: 0,
            attempt_nfe: 0,
            nfe_disc: 0,
            restarts: 0,
            tests: 0,
            violations: 0,
            proposed: vec![0; steps + 1],
            accepted: vec![0; steps + 1],
            reject_depths: Vec::new(),
            events: Vec::new(),
            keep_events: true,
        }
    }

    /// Keeps counters only.
    pub fn without_events(mut self) -> Self {
        self.keep_events = false;
        self
    }

    pub fn rejections(&self) -> usize {
        self.reject_depths.iter().sum()
    }

    pub(crate) fn log(&mut self, t: usize, kind: EventKind, log_l: Option<LogRatio>) {
        match kind {
            EventKind::Propose => self.proposed[t] += 1,
            EventKind::Accept => self.accepted[t] += 1,
            _ => {}
        }
        if self.keep_events {
            self.events.push(Event {
                t,
                kind,
                log_l: log_l.map(LogRatio::value),
                depth: 0,
            });
        }
    }

    /// Logs a rejection whose depth is only known later; pass the handle to
    /// [`finish_reject`](Self::finish_reject).
    pub(crate) fn begin_reject(&mut self, t: usize, log_l: LogRatio) -> Option<usize> {
        self.keep_events.then(|| {
            self.log(t, EventKind::Reject, Some(log_l));
            self.events.len() - 1
        })
    }

    pub(crate) fn finish_reject(&mut self, handle: Option<usize>, depth: usize) {
        if self.reject_depths.len() <= depth {
            self.reject_depths.resize(depth + 1, 0);
        }
        self.reject_depths[depth] += 1;
        if let Some(i) = handle {
            self.events[i].depth = depth;
        }
    }
}

/// Plain ancestral sampling of `n_chains` chains; chain `i` uses stream `(seed, i)`.
pub fn base_sample(model: &DiffusionModel, n_chains: usize, seed: u64) -> Result<Vec<ChainRecord>> {
    if n_chains == 0 {
        return Err(Error::InvalidArgument("n_chains must be at least 1".into()));
    }
    (0..n_chains)
        .into_par_iter()
        .map(|i| {
            let mut rng = chain_rng(seed, i as u64);
            let mut record = ChainRecord::new(i, model.steps());
            model.run_base_chain(&mut record, &mut rng)?;
            Ok(record)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_vp_schedule, BetaRule};

    fn bimodal() -> GaussianMixture {
        GaussianMixture::new(
            1,
            vec![
                Component::isotropic(0.5, vec![-1.5], 0.2),
                Component::isotropic(0.5, vec![1.0], 0.1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn model_error_knobs() {
        let q = bimodal();
        let p = ModelError {
            mean_shift: vec![0.5],
            weight_perturbation: 0.2,
            cov_scale: 2.0,
        }
        .apply(&q)
        .unwrap();
        let c = p.components();
        assert_eq!(c[0].mean[0], -1.0);
        assert_eq!(c[1].mean[0], 1.5);
        assert!((c[0].weight - 0.6).abs() < 1e-15 && (c[1].weight - 0.4).abs() < 1e-15);
        assert!((c[1].cov[0] - 0.2).abs() < 1e-15);
        assert_eq!(ModelError::default().apply(&q).unwrap(), q);
        assert!(ModelError::shift(vec![1.0, 2.0]).apply(&q).is_err());
    }

    #[test]
    fn standard_normal_kernels_coincide() {
        let s = make_vp_schedule(5, 0.1, 0.3, BetaRule::Linear).unwrap();
        let p0 = GaussianMixture::standard_normal(1);
        let exact = DiffusionModel::exact(&p0, &s).unwrap();
        let approx =
            DiffusionModel::new(&p0, &s, KernelMode::GaussianApprox, VarianceRule::Beta).unwrap();
        for t in 0..5 {
            let beta = s.beta(t + 1);
            let (mean, var) = approx.gaussian_kernel(t, &[0.8]).unwrap();
            // the covariance ridge perturbs the score at the 1e-9 level
            assert!((mean[0] - 0.8 * (1.0 - beta).sqrt()).abs() < 1e-8);
            assert_eq!(var, beta);
            for x in [-1.0, 0.2, 1.7] {
                let a = exact.transition_log_density(t, &[0.8], &[x]).unwrap();
                let b = approx.transition_log_density(t, &[0.8], &[x]).unwrap();
                assert!((a - b).abs() < 1e-7, "t={t} x={x} {a} {b}");
            }
        }
    }

    #[test]
    fn reported_density_is_self_consistent() {
        let s = make_vp_schedule(6, 0.05, 0.3, BetaRule::Linear).unwrap();
        let mut rng = chain_rng(2, 0);
        for mode in [KernelMode::ExactReverse, KernelMode::GaussianApprox] {
            for rule in [VarianceRule::Beta, VarianceRule::PosteriorMatched] {
                let m = DiffusionModel::new(&bimodal(), &s, mode, rule).unwrap();
                for t in 0..6 {
                    let (x, lp) = m.model_transition(t, &[0.4], &mut rng).unwrap();
                    let again = m.transition_log_density(t, &[0.4], &x).unwrap();
                    assert!((lp - again).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exact_kernel_density_integrates_to_one() {
        let s = make_vp_schedule(6, 0.05, 0.3, BetaRule::Linear).unwrap();
        let m = DiffusionModel::exact(&bimodal(), &s).unwrap();
        let (lo, hi, n) = (-8.0, 8.0, 8000);
        let h = (hi - lo) / n as f64;
        for t in [0, 3, 5] {
            let total: f64 = (0..n)
                .map(|i| {
                    let x = lo + (i as f64 + 0.5) * h;
                    m.transition_log_density(t, &[-0.3], &[x]).unwrap().exp() * h
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn transition_bounds() {
        let s = make_vp_schedule(3, 0.1, 0.2, BetaRule::Linear).unwrap();
        let m = DiffusionModel::exact(&bimodal(), &s).unwrap();
        let mut rng = chain_rng(0, 0);
        assert!(m.model_transition(3, &[0.0], &mut rng).is_err());
        assert!(m.model_transition(0, &[0.0, 1.0], &mut rng).is_err());
    }

    #[test]
    fn base_sample_counts_and_determinism() {
        let s = make_vp_schedule(7, 0.05, 0.3, BetaRule::Linear).unwrap();
        let m = DiffusionModel::exact(&bimodal(), &s).unwrap();
        let a = base_sample(&m, 64, 99).unwrap();
        let b = base_sample(&m, 64, 99).unwrap();
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|r| r.nfe_model == 7 && r.t == 0 && r.nfe_disc == 0));
        assert!(base_sample(&m, 0, 1).is_err());
        // same stream as sample_trajectory
        let traj = m.sample_trajectory(&mut chain_rng(99, 5)).unwrap();
        assert_eq!(traj[0], a[5].x);
    }
}
