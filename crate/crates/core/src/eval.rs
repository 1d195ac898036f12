//! Monte-Carlo bound estimators, sample distances and run summaries.
//!
//! `J` is the KL upper bound between the data chain and the model chain:
//! `E_q[log q_T/p_T (x_T) + Σ_t log q_{t|t+1}(x_t|x_{t+1}) / p^θ_{t|t+1}(x_t|x_{t+1})]`.
//! `R` is the estimator-dependent correction
//! `E_q[-log Ā_T(x_T) - Σ_t log Ā_t(x_t, x_{t+1})]` with `Ā_t = L̂_t / L̂_{t+1}` and
//! `Ā_T` the prior ratio. With exact ratios the two cancel sample by sample.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ChainRecord, DiffusionModel};
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, MixtureDiffusion};
use crate::ratio::{PriorReference, RatioEstimator};
use crate::rng::{chain_rng, Entropy};
use crate::schedule::NoiseSchedule;
use crate::stats::{mean, sample_std, standard_error};

/// A Monte-Carlo mean with its standard error `sample_std / √n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub value: f64,
    pub mc_std_error: f64,
    pub n_samples: usize,
}

impl BoundEstimate {
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no Monte-Carlo samples".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Monte-Carlo sample".into()));
        }
        Ok(Self {
            value: mean(values),
            mc_std_error: standard_error(values),
            n_samples: values.len(),
        })
    }
}

/// Smallest Monte-Carlo size accepted by the bound estimators.
pub const MIN_MC_SAMPLES: usize = 100;

fn check_mc(n_mc: usize) -> Result<()> {
    if n_mc < MIN_MC_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_MC_SAMPLES} Monte-Carlo samples, got {n_mc}"
        )));
    }
    Ok(())
}

/// Forward trajectory `x_0 ~ q_0`, `x_{t+1} ~ q_{t+1|t}(· | x_t)`; element `t` is `x_t`.
pub fn forward_trajectory<E: Entropy + ?Sized>(
    q0: &GaussianMixture,
    schedule: &NoiseSchedule,
    rng: &mut E,
) -> Result<Vec<Vec<f64>>> {
    let mut states = Vec::with_capacity(schedule.steps() + 1);
    states.push(q0.sample_one(rng));
    for t in 0..schedule.steps() {
        let next = schedule.one_step_forward(&states[t], t, rng)?;
        states.push(next);
    }
    Ok(states)
}

/// Per-sample values of `f` over forward trajectories; sample `i` uses stream `(seed, i)`,
/// so the result does not depend on how the work is split.
fn over_trajectories<F>(
    q0: &GaussianMixture,
    schedule: &NoiseSchedule,
    n_mc: usize,
    seed: u64,
    f: F,
) -> Result<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> Result<f64> + Sync,
{
    (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = chain_rng(seed, i as u64);
            f(&forward_trajectory(q0, schedule, &mut rng)?)
        })
        .collect()
}

/// Monte-Carlo estimate of `J`, with `p_T` chosen by `prior`.
///
/// [`PriorReference::StandardNormal`] is the prior the samplers actually use.
pub fn estimate_j(
    q0: &GaussianMixture,
    model: &DiffusionModel,
    prior: PriorReference,
    n_mc: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    check_mc(n_mc)?;
    if q0.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: q0.dim(),
        });
    }
    let steps = model.steps();
    let q = MixtureDiffusion::new(q0, model.schedule())?;
    let standard_normal = GaussianMixture::standard_normal(q0.dim());
    let p_t = match prior {
        PriorReference::StandardNormal => &standard_normal,
        PriorReference::ModelMarginal => model.diffusion().marginal(steps),
    };
    let values = over_trajectories(q0, model.schedule(), n_mc, seed, |xs| {
        let mut total = q.marginal(steps).log_density(&xs[steps])? - p_t.log_density(&xs[steps])?;
        for t in 0..steps {
            total += q.posterior_log_density(t, &xs[t + 1], &xs[t])?
                - model.transition_log_density(t, &xs[t + 1], &xs[t])?;
        }
        Ok(total)
    })?;
    BoundEstimate::from_samples(&values)
}

/// Monte-Carlo estimate of `R` for `estimator` over forward trajectories of `q0`.
pub fn estimate_r<R: RatioEstimator + ?Sized>(
    q0: &GaussianMixture,
    schedule: &NoiseSchedule,
    estimator: &R,
    n_mc: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    check_mc(n_mc)?;
    let steps = schedule.steps();
    if estimator.steps() != steps {
        return Err(Error::InvalidArgument(format!(
            "estimator covers {} steps, schedule has {steps}",
            estimator.steps()
        )));
    }
    let values = over_trajectories(q0, schedule, n_mc, seed, |xs| {
        let mut log_a = estimator.log_prior_ratio(&xs[steps])?.value();
        let mut l_next = estimator.log_ratio(&xs[steps], steps)?.value();
        for t in (0..steps).rev() {
            let l = estimator.log_ratio(&xs[t], t)?.value();
            log_a += l - l_next;
            l_next = l;
        }
        Ok(-log_a)
    })?;
    BoundEstimate::from_samples(&values)
}

/// `KL(q || p)` by Monte Carlo over `n` draws from `q`.
pub fn kl_monte_carlo(
    q: &GaussianMixture,
    p: &GaussianMixture,
    n: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    check_mc(n)?;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = q.sample_one(&mut chain_rng(seed, i as u64));
            Ok(q.log_density(&x)? - p.log_density(&x)?)
        })
        .collect::<Result<_>>()?;
    BoundEstimate::from_samples(&values)
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "sample sets must be nonempty".into(),
        ));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(dim)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Wasserstein-1 distance between two 1D empirical distributions given sorted values.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    // ∫ |F_a - F_b| over the merged support
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let take_a = j == b.len() || (i < a.len() && a[i] <= b[j]);
        let x = if take_a { a[i] } else { b[j] };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        if take_a {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

fn project(samples: &[Vec<f64>], direction: &[f64]) -> Vec<f64> {
    samples
        .iter()
        .map(|x| x.iter().zip(direction).map(|(a, b)| a * b).sum())
        .collect()
}

/// Mean 1D Wasserstein-1 distance over `n_projections` random unit directions.
pub fn sliced_wasserstein(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let dim = check_samples(a, b)?;
    if n_projections == 0 {
        return Err(Error::InvalidArgument(
            "need at least one projection".into(),
        ));
    }
    let mut rng = chain_rng(seed, 0);
    let directions: Vec<Vec<f64>> = (0..n_projections)
        .map(|_| loop {
            let v = rng.standard_normal_vec(dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let distances: Vec<f64> = directions
        .par_iter()
        .map(|d| wasserstein_1d_sorted(&sorted(project(a, d)), &sorted(project(b, d))))
        .collect();
    Ok(mean(&distances))
}

/// `Σ_{i<j} |v_i - v_j|` for sorted `v`.
fn pairwise_abs_sum_sorted(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - n + 1.0))
        .sum()
}

/// Energy statistic of a pooled 1D sample split at `n_a`, in `O(n log n)`.
fn energy_1d(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = sorted(a.to_vec());
    let sb = sorted(b.to_vec());
    let mut pooled = sa.clone();
    pooled.extend_from_slice(&sb);
    let pooled = sorted(pooled);
    let within_a = pairwise_abs_sum_sorted(&sa);
    let within_b = pairwise_abs_sum_sorted(&sb);
    let cross = pairwise_abs_sum_sorted(&pooled) - within_a - within_b;
    2.0 * cross / (na * nb) - 2.0 * within_a / (na * na) - 2.0 * within_b / (nb * nb)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Energy statistic for a labelling of a pooled sample with a precomputed distance matrix.
fn energy_from_matrix(dist: &[f64], n: usize, in_a: &[bool]) -> f64 {
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist[i * n + j];
            match (in_a[i], in_a[j]) {
                (true, true) => aa += d,
                (false, false) => bb += d,
                _ => ab += d,
            }
        }
    }
    let na = in_a.iter().filter(|x| **x).count() as f64;
    let nb = n as f64 - na;
    2.0 * ab / (na * nb) - 2.0 * aa / (na * na) - 2.0 * bb / (nb * nb)
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` between empirical distributions.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = check_samples(a, b)?;
    if dim == 1 {
        let flat = |s: &[Vec<f64>]| s.iter().map(|x| x[0]).collect::<Vec<_>>();
        return Ok(energy_1d(&flat(a), &flat(b)));
    }
    let cross: f64 = a
        .par_iter()
        .map(|x| b.iter().map(|y| euclidean(x, y)).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let within = |s: &[Vec<f64>]| -> f64 {
        s.par_iter()
            .enumerate()
            .map(|(i, x)| s[i + 1..].iter().map(|y| euclidean(x, y)).sum::<f64>())
            .collect::<Vec<_>>()
            .iter()
            .sum()
    };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    Ok(2.0 * cross / (na * nb) - 2.0 * within(a) / (na * na) - 2.0 * within(b) / (nb * nb))
}

/// Result of a permutation two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Pooled size above which the multivariate permutation test refuses to build
/// its distance matrix.
pub const MAX_POOLED_MULTIVARIATE: usize = 6000;

/// Energy-distance permutation test with `n_permutations` relabellings.
///
/// The p-value is `(1 + #{permuted ≥ observed}) / (1 + n_permutations)`.
pub fn energy_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_permutations: usize,
    seed: u64,
) -> Result<TwoSampleTest> {
    let dim = check_samples(a, b)?;
    let n = a.len() + b.len();
    let statistic = energy_distance(a, b)?;
    let permuted: Vec<f64> = if dim == 1 {
        let pooled: Vec<f64> = a.iter().chain(b).map(|x| x[0]).collect();
        (0..n_permutations)
            .into_par_iter()
            .map(|k| {
                let mut p = pooled.clone();
                p.shuffle(&mut chain_rng(seed, k as u64));
                energy_1d(&p[..a.len()], &p[a.len()..])
            })
            .collect()
    } else {
        if n > MAX_POOLED_MULTIVARIATE {
            return Err(Error::InvalidArgument(format!(
                "multivariate energy test limited to {MAX_POOLED_MULTIVARIATE} pooled points, got {n}"
            )));
        }
        let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
        let dist: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|k| euclidean(pooled[k / n], pooled[k % n]))
            .collect();
        (0..n_permutations)
            .into_par_iter()
            .map(|k| {
                let mut labels: Vec<bool> = (0..n).map(|i| i < a.len()).collect();
                labels.shuffle(&mut chain_rng(seed, k as u64));
                energy_from_matrix(&dist, n, &labels)
            })
            .collect()
    };
    let exceed = permuted.iter().filter(|s| **s >= statistic).count();
    Ok(TwoSampleTest {
        statistic,
        p_value: (1 + exceed) as f64 / (1 + n_permutations) as f64,
    })
}

/// Aggregate counters and event statistics of a sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_chains: usize,
    pub mean_nfe_model: f64,
    pub std_nfe_model: f64,
    pub mean_nfe_disc: f64,
    pub std_nfe_disc: f64,
    /// Accepted over proposed, per timestep `0..=T`; `None` where nothing was proposed.
    pub acceptance_rate: Vec<Option<f64>>,
    /// Rejections by how far the chain moved back up (index = depth).
    pub reinit_depth_histogram: Vec<usize>,
    pub rejections: usize,
    pub restarts: usize,
    /// Fraction of accept/reject decisions whose raw probability exceeded one.
    pub violation_rate: f64,
}

pub fn summarize_run(records: &[ChainRecord]) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "no chain records to summarize".into(),
        ));
    }
    let counts =
        |f: fn(&ChainRecord) -> usize| records.iter().map(|r| f(r) as f64).collect::<Vec<_>>();
    let nfe_model = counts(|r| r.nfe_model);
    let nfe_disc = counts(|r| r.nfe_disc);
    let width = records.iter().map(|r| r.proposed.len()).max().unwrap_or(0);
    let mut proposed = vec![0usize; width];
    let mut accepted = vec![0usize; width];
    let mut histogram: Vec<usize> = Vec::new();
    for r in records {
        for (t, (p, a)) in r.proposed.iter().zip(&r.accepted).enumerate() {
            proposed[t] += p;
            accepted[t] += a;
        }
        if histogram.len() < r.reject_depths.len() {
            histogram.resize(r.reject_depths.len(), 0);
        }
        for (depth, n) in r.reject_depths.iter().enumerate() {
            histogram[depth] += n;
        }
    }
    let rejections = histogram.iter().sum();
    let tests: usize = records.iter().map(|r| r.tests).sum();
    let violations: usize = records.iter().map(|r| r.violations).sum();
    Ok(RunSummary {
        n_chains: records.len(),
        mean_nfe_model: mean(&nfe_model),
        std_nfe_model: sample_std(&nfe_model),
        mean_nfe_disc: mean(&nfe_disc),
        std_nfe_disc: sample_std(&nfe_disc),
        acceptance_rate: proposed
            .iter()
            .zip(&accepted)
            .map(|(p, a)| (*p > 0).then(|| *a as f64 / *p as f64))
            .collect(),
        reinit_depth_histogram: histogram,
        rejections,
        restarts: records.iter().map(|r| r.restarts).sum(),
        violation_rate: if tests == 0 {
            0.0
        } else {
            violations as f64 / tests as f64
        },
    })
}
