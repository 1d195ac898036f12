//! Monte-Carlo bound estimates against deterministic quadrature.

use diffrs_core::*;

const LO: f64 = -9.0;
const HI: f64 = 9.0;
const CELLS: usize = 900;

fn grid() -> (Vec<f64>, f64) {
    let h = (HI - LO) / CELLS as f64;
    ((0..=CELLS).map(|i| LO + h * i as f64).collect(), h)
}

/// Trapezoid weights on the uniform grid.
fn weight(i: usize, h: f64) -> f64 {
    if i == 0 || i == CELLS {
        0.5 * h
    } else {
        h
    }
}

fn densities(g: &GaussianMixture, xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| g.log_density(&[*x]).unwrap().exp())
        .collect()
}

/// `E_q[log q_{t|t+1} / p_{t|t+1}]` with both posteriors assembled on the grid from the
/// marginal at `t` and the forward kernel: `q_{t|t+1}(a|b) = q_t(a) k(b|a) / ∫ q_t k db`.
fn transition_kl(
    q_t: &[f64],
    p_t: &[f64],
    xs: &[f64],
    h: f64,
    kernel: &dyn Fn(f64, f64) -> f64,
) -> f64 {
    let n = xs.len();
    let mut k = vec![0.0; n * n]; // k[a * n + b]
    for (a, xa) in xs.iter().enumerate() {
        for (b, xb) in xs.iter().enumerate() {
            k[a * n + b] = kernel(*xa, *xb);
        }
    }
    let evidence = |m: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|b| (0..n).map(|a| weight(a, h) * m[a] * k[a * n + b]).sum())
            .collect()
    };
    let (q_next, p_next) = (evidence(q_t), evidence(p_t));
    let mut total = 0.0;
    for a in 0..n {
        for b in 0..n {
            let joint = q_t[a] * k[a * n + b];
            if joint < 1e-300 || p_t[a] <= 0.0 {
                continue;
            }
            let log_q = (q_t[a] / q_next[b]).ln();
            let log_p = (p_t[a] / p_next[b]).ln();
            total += weight(a, h) * weight(b, h) * joint * (log_q - log_p);
        }
    }
    total
}

fn quadrature_j(bench: &benchmark::Benchmark) -> f64 {
    let (xs, h) = grid();
    let steps = bench.steps();
    let q_t = |t| {
        densities(
            &forward_marginal(&bench.q0, &bench.schedule, t).unwrap(),
            &xs,
        )
    };
    let p_t = |t| {
        densities(
            &forward_marginal(&bench.p0, &bench.schedule, t).unwrap(),
            &xs,
        )
    };
    let q_last = q_t(steps);
    let std_normal: Vec<f64> = xs
        .iter()
        .map(|x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
        .collect();
    let mut j: f64 = (0..xs.len())
        .filter(|i| q_last[*i] > 1e-300)
        .map(|i| weight(i, h) * q_last[i] * (q_last[i] / std_normal[i]).ln())
        .sum();
    for t in 0..steps {
        let beta = bench.schedule.beta(t + 1);
        let kernel = |a: f64, b: f64| {
            let d = b - (1.0 - beta).sqrt() * a;
            (-0.5 * d * d / beta).exp() / (2.0 * std::f64::consts::PI * beta).sqrt()
        };
        j += transition_kl(&q_t(t), &p_t(t), &xs, h, &kernel);
    }
    j
}

#[test]
fn monte_carlo_j_matches_grid_quadrature() {
    let bench = benchmark::bimodal_1d().unwrap();
    let reference = quadrature_j(&bench);
    let j = estimate_j(
        &bench.q0,
        &bench.model().unwrap(),
        PriorReference::StandardNormal,
        100_000,
        21,
    )
    .unwrap();
    assert!(
        (j.value - reference).abs() < 3.0 * j.mc_std_error,
        "MC {} ± {} vs quadrature {reference}",
        j.value,
        j.mc_std_error
    );
}

#[test]
fn oracle_r_cancels_j_and_trivial_r_vanishes() {
    let bench = benchmark::bimodal_1d().unwrap();
    let j = estimate_j(
        &bench.q0,
        &bench.model().unwrap(),
        PriorReference::StandardNormal,
        50_000,
        31,
    )
    .unwrap();
    let r = estimate_r(
        &bench.q0,
        &bench.schedule,
        &bench.oracle().unwrap(),
        50_000,
        32,
    )
    .unwrap();
    assert!(
        (j.value + r.value).abs() <= 3.0 * (j.mc_std_error + r.mc_std_error),
        "J {} ± {}, R {} ± {}",
        j.value,
        j.mc_std_error,
        r.value,
        r.mc_std_error
    );
    let trivial = ConstantEstimator::trivial(bench.steps());
    let zero = estimate_r(&bench.q0, &bench.schedule, &trivial, 1000, 33).unwrap();
    assert_eq!(zero.value, 0.0);
    assert_eq!(zero.mc_std_error, 0.0);
}

#[test]
fn estimates_do_not_depend_on_the_thread_pool() {
    let bench = benchmark::bimodal_1d().unwrap();
    let model = bench.model().unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                estimate_j(&bench.q0, &model, PriorReference::StandardNormal, 5000, 41).unwrap()
            })
    };
    assert_eq!(run(1), run(3));
}
