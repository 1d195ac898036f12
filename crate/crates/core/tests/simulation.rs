//! Closed-form marginals and posteriors against brute-force simulation of the forward chain.

use diffrs_core::eval::forward_trajectory;
use diffrs_core::*;

const N: usize = 20_000;
const PERMUTATIONS: usize = 200;

fn assert_same_law(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) {
    let test = energy_test(a, b, PERMUTATIONS, 99).unwrap();
    assert!(test.p_value > 0.01, "{what}: p = {}", test.p_value);
}

#[test]
fn closed_form_marginals_match_direct_perturbation() {
    let bench = benchmark::bimodal_1d().unwrap();
    let mut rng = chain_rng(1, 0);
    for t in 1..=bench.steps() {
        let perturbed: Vec<Vec<f64>> = (0..N)
            .map(|_| {
                let x0 = bench.q0.sample_one(&mut rng);
                bench.schedule.forward_perturb(&x0, t, &mut rng).unwrap()
            })
            .collect();
        let closed = forward_marginal(&bench.q0, &bench.schedule, t)
            .unwrap()
            .sample(&mut rng, N);
        assert_same_law(&perturbed, &closed, &format!("t={t}"));
    }
}

#[test]
fn chained_single_steps_match_the_marginal() {
    let bench = benchmark::bimodal_1d().unwrap();
    let steps = bench.steps();
    let mut rng = chain_rng(2, 0);
    let chained: Vec<Vec<f64>> = (0..N)
        .map(|_| forward_trajectory(&bench.q0, &bench.schedule, &mut rng).unwrap()[steps].clone())
        .collect();
    let closed = forward_marginal(&bench.q0, &bench.schedule, steps)
        .unwrap()
        .sample(&mut rng, N);
    assert_same_law(&chained, &closed, "x_T");
}

#[test]
fn two_d_marginal_matches_direct_perturbation() {
    let bench = benchmark::ring_2d().unwrap();
    let n = 1500;
    let mut rng = chain_rng(3, 0);
    for t in [1, 8, 20] {
        let perturbed: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let x0 = bench.q0.sample_one(&mut rng);
                bench.schedule.forward_perturb(&x0, t, &mut rng).unwrap()
            })
            .collect();
        let closed = forward_marginal(&bench.q0, &bench.schedule, t)
            .unwrap()
            .sample(&mut rng, n);
        assert_same_law(&perturbed, &closed, &format!("t={t}"));
    }
}

#[test]
fn reverse_posterior_reproduces_forward_pairs() {
    // (x_t, x_{t+1}) from the forward chain, against x_{t+1} from the marginal
    // followed by x_t from the reverse posterior.
    let bench = benchmark::bimodal_1d().unwrap();
    let diffusion = MixtureDiffusion::new(&bench.q0, &bench.schedule).unwrap();
    let n = 1500;
    let mut rng = chain_rng(4, 0);
    for t in [0, 2] {
        let forward: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let xs = forward_trajectory(&bench.q0, &bench.schedule, &mut rng).unwrap();
                vec![xs[t][0], xs[t + 1][0]]
            })
            .collect();
        let reverse: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let x_next = diffusion.marginal(t + 1).sample_one(&mut rng);
                let (x_t, _) = diffusion.sample_posterior(t, &x_next, &mut rng).unwrap();
                vec![x_t[0], x_next[0]]
            })
            .collect();
        assert_same_law(&forward, &reverse, &format!("pairs at t={t}"));
    }
}

#[test]
fn long_base_chain_recovers_the_model_distribution() {
    let schedule = make_vp_schedule(100, 1e-3, 0.2, BetaRule::Linear).unwrap();
    let bench = benchmark::bimodal_1d().unwrap();
    let model = DiffusionModel::exact(&bench.p0, &schedule).unwrap();
    let records = base_sample(&model, N, 5).unwrap();
    assert!(records.iter().all(|r| r.nfe_model == 100));
    let reference = bench.p0.sample(&mut chain_rng(6, 0), N);
    assert_same_law(&final_samples(&records), &reference, "x_0");
}

#[test]
fn gaussian_kernel_is_exact_for_a_standard_normal_model() {
    let schedule = make_vp_schedule(10, 0.01, 0.3, BetaRule::Linear).unwrap();
    let p0 = GaussianMixture::standard_normal(1);
    let exact = DiffusionModel::exact(&p0, &schedule).unwrap();
    let approx = DiffusionModel::new(
        &p0,
        &schedule,
        KernelMode::GaussianApprox,
        VarianceRule::Beta,
    )
    .unwrap();
    for t in 1..10 {
        for (x_next, x_t) in [(0.3, -0.2), (-1.5, 1.0), (2.0, 2.1)] {
            let a = exact.transition_log_density(t, &[x_next], &[x_t]).unwrap();
            let b = approx.transition_log_density(t, &[x_next], &[x_t]).unwrap();
            assert!((a - b).abs() < 1e-6, "t={t}: {a} vs {b}");
        }
    }
}
