//! The sequential rejection sampler.
//!
//! Every reverse step proposes `x̃_t ~ p^θ_{t|t+1}(· | x_{t+1})` and accepts it with
//! probability `min(1, L̂_t(x̃_t) / (M_t L̂_{t+1}(x_{t+1})))`. A rejected proposal is
//! pushed forward in time one step at a time until a marginal test
//! `min(1, L̂_s / M̃_s)` passes (always at `T`), and the chain descends again
//! from there. The prior draw is itself rejection-sampled with `L̂_T / M̃_T`.
//!
//! The mutual recursion between the one-step sampler and re-initialization
//! unrolls into a single loop over a `(t, x_t, log L_t)` state: a rejection
//! replaces the state by the re-initialized one, and descending from it is the
//! same loop. RNG draws happen in the same order as the recursive form.
//!
//! Every accept/reject test reads one uniform from a decision stream kept apart
//! from the proposal noise, so with a trivial estimator the sampler consumes
//! exactly the base sampler's noise stream.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ChainRecord, DiffusionModel, EventKind};
use crate::error::{Error, Result};
use crate::gmm::LogRatio;
use crate::ratio::RatioEstimator;
use crate::rng::{chain_rng, DecisionRng, Entropy};
use crate::stats::nearest_rank_percentile;

/// `min(1, exp(log L_t - log L_{t+1} - log M_t))`.
pub fn acceptance_prob(log_l_t: LogRatio, log_l_next: LogRatio, log_m: f64) -> f64 {
    log_acceptance(log_l_t, log_l_next, log_m).min(0.0).exp()
}

/// The unclamped log acceptance probability; positive values are constant violations.
pub fn log_acceptance(log_l_t: LogRatio, log_l_next: LogRatio, log_m: f64) -> f64 {
    log_l_t.value() - log_l_next.value() - log_m
}

/// Rejection constants, all in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RejectionConstants {
    pub gamma: f64,
    /// Model-kernel evaluations allowed per chain attempt; `None` is unbounded.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// `log M_t` for the transition `t+1 → t`, `t = 0..T`.
    #[serde(rename = "logM")]
    pub log_m: Vec<f64>,
    /// `log M̃_t` for `t = 0..=T`; the last entry bounds the prior ratio.
    #[serde(rename = "logM_marginal")]
    pub log_m_marginal: Vec<f64>,
}

impl RejectionConstants {
    /// `M ≡ 1` everywhere.
    pub fn unit(steps: usize, k: Option<usize>) -> Self {
        Self {
            gamma: 100.0,
            k,
            log_m: vec![0.0; steps],
            log_m_marginal: vec![0.0; steps + 1],
        }
    }

    pub fn steps(&self) -> usize {
        self.log_m.len()
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.log_m.len() != steps || self.log_m_marginal.len() != steps + 1 {
            return Err(Error::InvalidArgument(format!(
                "constants cover {} steps, model has {steps}",
                self.log_m.len()
            )));
        }
        if !(0.0..=100.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} outside [0, 100]",
                self.gamma
            )));
        }
        if self.k == Some(0) {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        let all = self.log_m.iter().chain(&self.log_m_marginal);
        if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "log constants must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Constants together with the log-ratios they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub constants: RejectionConstants,
    /// `[t][i]`: `log L̂_t(x_t) - log L̂_{t+1}(x_{t+1})` along calibration chain `i`.
    pub transition_log_ratios: Vec<Vec<f64>>,
    /// `[t][i]`: `log L̂_t(x_t)`; entry `T` holds prior ratios of the prior draws.
    pub marginal_log_ratios: Vec<Vec<f64>>,
}

impl Calibration {
    /// Recomputes the constants for another percentile from the stored ratios.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let constants = constants_from_log_ratios(
            &self.transition_log_ratios,
            &self.marginal_log_ratios,
            gamma,
            self.constants.k,
        )?;
        Ok(Self {
            constants,
            ..self.clone()
        })
    }

    /// Stored ratios whose acceptance probability would have been clamped.
    pub fn clamped_count(&self) -> usize {
        let over = |values: &[Vec<f64>], bounds: &[f64]| -> usize {
            values
                .iter()
                .zip(bounds)
                .map(|(vs, m)| vs.iter().filter(|v| *v > m).count())
                .sum()
        };
        over(&self.transition_log_ratios, &self.constants.log_m)
            + over(&self.marginal_log_ratios, &self.constants.log_m_marginal)
    }
}

/// Nearest-rank `gamma` percentile per timestep, floored at `log M = 0`.
pub fn constants_from_log_ratios(
    transition: &[Vec<f64>],
    marginal: &[Vec<f64>],
    gamma: f64,
    k: Option<usize>,
) -> Result<RejectionConstants> {
    let percentiles = |values: &[Vec<f64>]| -> Result<Vec<f64>> {
        values
            .iter()
            .map(|vs| {
                nearest_rank_percentile(vs, gamma)
                    .map(|p| p.max(0.0))
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "cannot take percentile {gamma} of {} values",
                            vs.len()
                        ))
                    })
            })
            .collect()
    };
    let constants = RejectionConstants {
        gamma,
        k,
        log_m: percentiles(transition)?,
        log_m_marginal: percentiles(marginal)?,
    };
    constants.validate(transition.len())?;
    Ok(constants)
}

/// Runs `n_calib` base chains and takes percentiles of the ratios met along the way.
///
/// Chain `i` uses stream `(seed, i)`. The prior draw of each chain doubles as the
/// prior sample for `M̃_T`.
pub fn calibrate_constants<R: RatioEstimator + ?Sized>(
    model: &DiffusionModel,
    estimator: &R,
    n_calib: usize,
    gamma: f64,
    k: Option<usize>,
    seed: u64,
) -> Result<Calibration> {
    if n_calib < 2 {
        return Err(Error::InvalidArgument(
            "calibration needs at least 2 chains".into(),
        ));
    }
    let steps = model.steps();
    check_estimator(model, estimator)?;
    let chains: Vec<(Vec<f64>, Vec<f64>)> = (0..n_calib)
        .into_par_iter()
        .map(|i| {
            let mut rng = chain_rng(seed, i as u64);
            let mut transition = vec![0.0; steps];
            let mut marginal = vec![0.0; steps + 1];
            let mut x = rng.standard_normal_vec(model.dim());
            marginal[steps] = estimator.log_prior_ratio(&x)?.value();
            let mut l_next = estimator.log_ratio(&x, steps)?;
            for t in (0..steps).rev() {
                x = model.model_transition(t, &x, &mut rng)?.0;
                let l = estimator.log_ratio(&x, t)?;
                transition[t] = l.value() - l_next.value();
                marginal[t] = l.value();
                l_next = l;
            }
            Ok((transition, marginal))
        })
        .collect::<Result<_>>()?;
    let column = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, t: usize| {
        chains.iter().map(|c| pick(c)[t]).collect::<Vec<f64>>()
    };
    let transition: Vec<Vec<f64>> = (0..steps).map(|t| column(&|c| &c.0, t)).collect();
    let marginal: Vec<Vec<f64>> = (0..=steps).map(|t| column(&|c| &c.1, t)).collect();
    let constants = constants_from_log_ratios(&transition, &marginal, gamma, k)?;
    Ok(Calibration {
        constants,
        transition_log_ratios: transition,
        marginal_log_ratios: marginal,
    })
}

fn check_estimator<R: RatioEstimator + ?Sized>(
    model: &DiffusionModel,
    estimator: &R,
) -> Result<()> {
    if estimator.steps() != model.steps() {
        return Err(Error::InvalidArgument(format!(
            "estimator covers {} steps, model has {}",
            estimator.steps(),
            model.steps()
        )));
    }
    Ok(())
}

/// Sampling variants: the full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Transition rejection, marginal re-initialization, prior rejection.
    #[serde(rename = "full")]
    FullDiffRS,
    /// Plain ancestral chains, with a single marginal test on `x_0` that resamples the chain.
    #[serde(rename = "marginal-only-t0")]
    MarginalOnlyT0,
    /// Per-step test `min(1, L̂_t / M̃_t)` instead of the transition ratio.
    #[serde(rename = "marginal-sequential")]
    MarginalSequential,
    /// A rejection moves the proposal one step forward without testing it.
    #[serde(rename = "reinit-one-step")]
    ReinitOneStepForwardOnly,
    /// A rejection restarts the chain from the prior.
    #[serde(rename = "reinit-prior")]
    ReinitFromPrior,
    /// The base sampler.
    #[serde(rename = "none")]
    NoRejection,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FullDiffRS,
        Strategy::MarginalOnlyT0,
        Strategy::MarginalSequential,
        Strategy::ReinitOneStepForwardOnly,
        Strategy::ReinitFromPrior,
        Strategy::NoRejection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FullDiffRS => "full",
            Strategy::MarginalOnlyT0 => "marginal-only-t0",
            Strategy::MarginalSequential => "marginal-sequential",
            Strategy::ReinitOneStepForwardOnly => "reinit-one-step",
            Strategy::ReinitFromPrior => "reinit-prior",
            Strategy::NoRejection => "none",
        }
    }

    fn tests_transitions(self) -> bool {
        !matches!(self, Strategy::MarginalOnlyT0 | Strategy::NoRejection)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|v| v.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown strategy {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// A point of a chain: `x_t` together with its cached `log L̂_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub t: usize,
    pub x: Vec<f64>,
    pub log_l: LogRatio,
}

/// Restarts allowed per chain before sampling gives up.
pub const DEFAULT_MAX_RESTARTS: usize = 1000;

/// The sampler for one model, estimator, constant table and strategy.
pub struct Sampler<'a, R: RatioEstimator + ?Sized> {
    model: &'a DiffusionModel,
    estimator: &'a R,
    constants: &'a RejectionConstants,
    strategy: Strategy,
    max_restarts: usize,
}

impl<'a, R: RatioEstimator + ?Sized> Sampler<'a, R> {
    pub fn new(
        model: &'a DiffusionModel,
        estimator: &'a R,
        constants: &'a RejectionConstants,
        strategy: Strategy,
    ) -> Result<Self> {
        check_estimator(model, estimator)?;
        constants.validate(model.steps())?;
        Ok(Self {
            model,
            estimator,
            constants,
            strategy,
            max_restarts: DEFAULT_MAX_RESTARTS,
        })
    }

    pub fn with_max_restarts(mut self, max_restarts: usize) -> Self {
        self.max_restarts = max_restarts;
        self
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    fn ratio(&self, x: &[f64], t: usize, record: &mut ChainRecord) -> Result<LogRatio> {
        record.nfe_disc += 1;
        self.estimator.log_ratio(x, t)
    }

    /// Accept with probability `min(1, exp(log_a))`.
    ///
    /// Every decision consumes one decision uniform, even a certain one, so the
    /// `k`-th test of a chain always sees the same uniform.
    fn decide<E: Entropy + ?Sized>(
        &self,
        log_a: f64,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> bool {
        record.tests += 1;
        if log_a > 0.0 {
            record.violations += 1;
        }
        let u = rng.decision_uniform();
        log_a >= 0.0 || u < log_a.exp()
    }

    fn check_budget(&self, record: &ChainRecord) -> Result<()> {
        match self.constants.k {
            Some(limit) if record.attempt_nfe >= limit => Err(Error::BudgetExhausted { limit }),
            _ => Ok(()),
        }
    }

    /// Draws `x_T`, rejection-sampled against `L̂_T / M̃_T` unless the strategy skips it.
    pub fn prior_draw<E: Entropy + ?Sized>(
        &self,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> Result<ChainState> {
        let steps = self.model.steps();
        record.t = steps;
        if !self.strategy.tests_transitions() {
            let x = rng.standard_normal_vec(self.model.dim());
            record.log(steps, EventKind::Propose, None);
            record.log(steps, EventKind::Accept, None);
            return Ok(ChainState {
                t: steps,
                x,
                log_l: LogRatio::ONE,
            });
        }
        loop {
            let x = rng.standard_normal_vec(self.model.dim());
            record.nfe_disc += 1;
            let prior = self.estimator.log_prior_ratio(&x)?;
            record.log(steps, EventKind::Propose, Some(prior));
            let log_a = prior.value() - self.constants.log_m_marginal[steps];
            if self.decide(log_a, rng, record) {
                let log_l = self.ratio(&x, steps, record)?;
                record.log(steps, EventKind::Accept, Some(log_l));
                return Ok(ChainState { t: steps, x, log_l });
            }
            let handle = record.begin_reject(steps, prior);
            record.finish_reject(handle, 0);
        }
    }

    /// One proposal at `t` from `state` (at `t + 1`) and its accept/reject decision,
    /// without any re-initialization. Returns the proposal on acceptance.
    pub fn transition_trial<E: Entropy + ?Sized>(
        &self,
        state: &ChainState,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> Result<(bool, ChainState)> {
        if state.t == 0 || state.t > self.model.steps() {
            return Err(Error::TimestepOutOfRange {
                t: state.t,
                min: 1,
                max: self.model.steps(),
            });
        }
        let t = state.t - 1;
        self.check_budget(record)?;
        let (x, _) = self.model.model_transition(t, &state.x, rng)?;
        record.nfe_model += 1;
        record.attempt_nfe += 1;
        record.t = t;
        let accepted_untested = |x| ChainState {
            t,
            x,
            log_l: LogRatio::ONE,
        };
        let log_a = match self.strategy {
            Strategy::NoRejection => None,
            Strategy::MarginalOnlyT0 if t > 0 => None,
            Strategy::MarginalOnlyT0 | Strategy::MarginalSequential => Some((
                self.ratio(&x, t, record)?,
                self.constants.log_m_marginal[t],
                LogRatio::ONE,
            )),
            _ => Some((
                self.ratio(&x, t, record)?,
                self.constants.log_m[t],
                state.log_l,
            )),
        };
        let Some((log_l, log_m, log_l_next)) = log_a else {
            record.log(t, EventKind::Propose, None);
            record.log(t, EventKind::Accept, None);
            return Ok((true, accepted_untested(x)));
        };
        record.log(t, EventKind::Propose, Some(log_l));
        let accepted = self.decide(log_acceptance(log_l, log_l_next, log_m), rng, record);
        if accepted {
            record.log(t, EventKind::Accept, Some(log_l));
        }
        Ok((accepted, ChainState { t, x, log_l }))
    }

    /// Re-initialization of a proposal `x_rejected` at `t_plus_1 - 1`: push it forward
    /// until a marginal test passes (unconditionally at `T`), then descend back to
    /// `t_plus_1`.
    pub fn reinitialize<E: Entropy + ?Sized>(
        &self,
        t_plus_1: usize,
        x_rejected: Vec<f64>,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> Result<ChainState> {
        let state = self.climb(t_plus_1, x_rejected, rng, record)?;
        self.descend(state, t_plus_1, rng, record)
    }

    /// Forward steps from level `from - 1` until the marginal test at some level passes.
    fn climb<E: Entropy + ?Sized>(
        &self,
        from: usize,
        mut x: Vec<f64>,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> Result<ChainState> {
        let steps = self.model.steps();
        if from == 0 || from > steps {
            return Err(Error::TimestepOutOfRange {
                t: from,
                min: 1,
                max: steps,
            });
        }
        let schedule = self.model.schedule();
        let mut level = from;
        loop {
            x = schedule.one_step_forward(&x, level - 1, rng)?;
            record.t = level;
            let log_l = self.ratio(&x, level, record)?;
            record.log(level, EventKind::ReinitFwd, Some(log_l));
            let accepted = level == steps
                || self.decide(
                    log_l.value() - self.constants.log_m_marginal[level],
                    rng,
                    record,
                );
            if accepted {
                record.log(level, EventKind::ReinitAccept, Some(log_l));
                return Ok(ChainState { t: level, x, log_l });
            }
            level += 1;
        }
    }

    /// Where a chain goes after its proposal `rejected` fails.
    fn after_rejection<E: Entropy + ?Sized>(
        &self,
        rejected: ChainState,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> Result<ChainState> {
        let t = rejected.t;
        let handle = record.begin_reject(t, rejected.log_l);
        let next = match self.strategy {
            Strategy::ReinitOneStepForwardOnly => {
                let x = self
                    .model
                    .schedule()
                    .one_step_forward(&rejected.x, t, rng)?;
                record.t = t + 1;
                let log_l = self.ratio(&x, t + 1, record)?;
                record.log(t + 1, EventKind::ReinitFwd, Some(log_l));
                ChainState { t: t + 1, x, log_l }
            }
            Strategy::ReinitFromPrior | Strategy::MarginalOnlyT0 => self.prior_draw(rng, record)?,
            _ => self.climb(t + 1, rejected.x, rng, record)?,
        };
        record.finish_reject(handle, next.t - t);
        Ok(next)
    }

    /// Runs the chain from `state` until it reaches level `target`.
    pub fn descend<E: Entropy + ?Sized>(
        &self,
        mut state: ChainState,
        target: usize,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> Result<ChainState> {
        while state.t > target {
            let (accepted, proposal) = self.transition_trial(&state, rng, record)?;
            state = if accepted {
                proposal
            } else {
                self.after_rejection(proposal, rng, record)?
            };
        }
        Ok(state)
    }

    /// Sample `x_t` given `x_{t+1}` and its cached ratio, re-initializing on rejection.
    pub fn one_step_diffrs<E: Entropy + ?Sized>(
        &self,
        t: usize,
        x_next: Vec<f64>,
        log_l_next: LogRatio,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> Result<ChainState> {
        let state = ChainState {
            t: t + 1,
            x: x_next,
            log_l: log_l_next,
        };
        self.descend(state, t, rng, record)
    }

    /// Runs one chain to `t = 0`, restarting from the prior whenever the budget runs out.
    ///
    /// On error the record keeps everything logged up to the failure.
    pub fn run_chain<E: Entropy + ?Sized>(
        &self,
        rng: &mut E,
        record: &mut ChainRecord,
    ) -> Result<()> {
        loop {
            let attempt = self
                .prior_draw(rng, record)
                .and_then(|s| self.descend(s, 0, rng, record));
            match attempt {
                Ok(state) => {
                    record.x = state.x;
                    record.t = 0;
                    record.log_l = state.log_l;
                    return Ok(());
                }
                Err(Error::BudgetExhausted { .. }) => {
                    if record.restarts >= self.max_restarts {
                        return Err(Error::RestartLimit {
                            chain: record.chain_id,
                            limit: self.max_restarts,
                        });
                    }
                    record.log(record.t, EventKind::Restart, None);
                    record.restarts += 1;
                    record.attempt_nfe = 0;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub strategy: Strategy,
    pub n_chains: usize,
    pub seed: u64,
    pub max_restarts: usize,
    /// Chains with index below this keep a full event log; the rest keep counters only.
    pub event_chains: usize,
}

impl SampleOptions {
    pub fn new(strategy: Strategy, n_chains: usize, seed: u64) -> Self {
        Self {
            strategy,
            n_chains,
            seed,
            max_restarts: DEFAULT_MAX_RESTARTS,
            event_chains: usize::MAX,
        }
    }
}

/// Samples `n_chains` chains; chain `i` uses stream `(seed, i)`, as in [`base_sample`].
///
/// [`base_sample`]: crate::diffusion::base_sample
pub fn diffrs_sample<R: RatioEstimator + ?Sized>(
    model: &DiffusionModel,
    estimator: &R,
    constants: &RejectionConstants,
    opts: &SampleOptions,
) -> Result<Vec<ChainRecord>> {
    if opts.n_chains == 0 {
        return Err(Error::InvalidArgument("n_chains must be at least 1".into()));
    }
    let sampler = Sampler::new(model, estimator, constants, opts.strategy)?
        .with_max_restarts(opts.max_restarts);
    (0..opts.n_chains)
        .into_par_iter()
        .map(|i| {
            let mut rng = DecisionRng::new(opts.seed, i as u64);
            let mut record = ChainRecord::new(i, model.steps());
            if i >= opts.event_chains {
                record = record.without_events();
            }
            sampler.run_chain(&mut rng, &mut record)?;
            Ok(record)
        })
        .collect()
}

/// Final points of a set of chains.
pub fn final_samples(records: &[ChainRecord]) -> Vec<Vec<f64>> {
    records.iter().map(|r| r.x.clone()).collect()
}
