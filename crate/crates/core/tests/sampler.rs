//! End-to-end properties of the rejection sampler on the reference problems.

use diffrs_core::*;

#[test]
fn accepted_proposals_follow_the_data_posterior() {
    let bench = benchmark::bimodal_1d().unwrap();
    let steps = bench.steps();
    let model = bench.model().unwrap();
    let oracle = bench.oracle().unwrap();
    let q = MixtureDiffusion::new(&bench.q0, &bench.schedule).unwrap();
    let n = 20_000;

    for (t, x_next) in [(0usize, 0.4), (2, -0.6)] {
        let x_next = vec![x_next];
        let l_next = oracle.log_ratio(&x_next, t + 1).unwrap();
        let mut rng = chain_rng(1, t as u64);
        let log_m = (0..100_000)
            .map(|_| {
                let (x, _) = model.model_transition(t, &x_next, &mut rng).unwrap();
                oracle.log_ratio(&x, t).unwrap().value() - l_next.value()
            })
            .fold(0.0f64, f64::max);
        let mut constants = RejectionConstants::unit(steps, None);
        constants.log_m[t] = log_m;

        let sampler = Sampler::new(&model, &oracle, &constants, Strategy::FullDiffRS).unwrap();
        let state = ChainState {
            t: t + 1,
            x: x_next.clone(),
            log_l: l_next,
        };
        let mut record = ChainRecord::new(0, steps).without_events();
        let mut accepted = Vec::with_capacity(n);
        let mut rng = chain_rng(2, t as u64);
        while accepted.len() < n {
            let (ok, proposal) = sampler
                .transition_trial(&state, &mut rng, &mut record)
                .unwrap();
            if ok {
                accepted.push(proposal.x);
            }
        }
        let mut rng = chain_rng(3, t as u64);
        let direct: Vec<Vec<f64>> = (0..n)
            .map(|_| q.sample_posterior(t, &x_next, &mut rng).unwrap().0)
            .collect();
        let proposals: Vec<Vec<f64>> = (0..n)
            .map(|_| model.model_transition(t, &x_next, &mut rng).unwrap().0)
            .collect();

        let exact = energy_test(&accepted, &direct, 200, 4).unwrap();
        assert!(
            exact.p_value > 0.01,
            "t={t}: accepted p = {}",
            exact.p_value
        );
        // The test has power here: raw model proposals are rejected.
        let raw = energy_test(&proposals, &direct, 200, 4).unwrap();
        assert!(
            raw.p_value <= 0.01,
            "t={t}: raw proposal p = {}",
            raw.p_value
        );
    }
}

fn ring_setup() -> (benchmark::Benchmark, DiffusionModel, OracleEstimator) {
    let bench = benchmark::ring_2d().unwrap();
    let model = bench.model().unwrap();
    let oracle = bench.oracle().unwrap();
    (bench, model, oracle)
}

#[test]
fn attempts_never_exceed_the_budget() {
    let (bench, model, oracle) = ring_setup();
    let k = 3 * bench.steps();
    let calibration = calibrate_constants(&model, &oracle, 300, 95.0, Some(k), 5).unwrap();
    for strategy in [Strategy::FullDiffRS, Strategy::MarginalSequential] {
        let records = diffrs_sample(
            &model,
            &oracle,
            &calibration.constants,
            &SampleOptions::new(strategy, 300, 6),
        )
        .unwrap();
        assert!(
            records.iter().any(|r| r.restarts > 0),
            "{strategy}: budget never bound"
        );
        for r in &records {
            assert!(
                r.attempt_nfe <= k,
                "{strategy}: attempt used {}",
                r.attempt_nfe
            );
            assert!(r.nfe_model <= (r.restarts + 1) * k);
            assert!(r.nfe_model >= bench.steps());
        }
    }
}

#[test]
fn mean_nfe_grows_with_the_percentile() {
    let (_, model, oracle) = ring_setup();
    let calibration = calibrate_constants(&model, &oracle, 500, 30.0, Some(96), 7).unwrap();
    let mut previous = 0.0;
    for gamma in [30.0, 50.0, 70.0, 85.0] {
        let constants = calibration.with_gamma(gamma).unwrap().constants;
        let records = diffrs_sample(
            &model,
            &oracle,
            &constants,
            &SampleOptions::new(Strategy::FullDiffRS, 500, 8),
        )
        .unwrap();
        let nfe = summarize_run(&records).unwrap().mean_nfe_model;
        assert!(nfe >= previous, "γ={gamma}: {nfe} < {previous}");
        previous = nfe;
    }
}

#[test]
fn maximal_percentile_never_clamps_its_own_calibration_set() {
    let (_, model, oracle) = ring_setup();
    let calibration = calibrate_constants(&model, &oracle, 400, 100.0, None, 9).unwrap();
    assert_eq!(calibration.clamped_count(), 0);
    for (stored, log_m) in calibration
        .transition_log_ratios
        .iter()
        .zip(&calibration.constants.log_m)
    {
        for v in stored {
            assert!(acceptance_prob(LogRatio::new(*v), LogRatio::ONE, *log_m) <= 1.0);
            assert!(v - log_m <= 0.0);
        }
    }
    // A lower percentile leaves some of the same set above its constant.
    assert!(calibration.with_gamma(80.0).unwrap().clamped_count() > 0);
}

#[test]
fn unit_ratios_leave_every_constant_at_one() {
    let (bench, model, _) = ring_setup();
    let trivial = ConstantEstimator::new(-0.5, bench.steps());
    let calibration = calibrate_constants(&model, &trivial, 50, 90.0, None, 10).unwrap();
    assert!(calibration.constants.log_m.iter().all(|m| *m == 0.0));
    assert!(calibration
        .constants
        .log_m_marginal
        .iter()
        .all(|m| *m == 0.0));
}

#[test]
fn sampling_does_not_depend_on_the_thread_pool() {
    let (_, model, oracle) = ring_setup();
    let calibration = calibrate_constants(&model, &oracle, 200, 85.0, Some(96), 11).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                diffrs_sample(
                    &model,
                    &oracle,
                    &calibration.constants,
                    &SampleOptions::new(Strategy::FullDiffRS, 200, 12),
                )
                .unwrap()
            })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn every_strategy_reduces_to_the_base_sampler_under_unit_ratios() {
    let (bench, model, _) = ring_setup();
    let trivial = ConstantEstimator::trivial(bench.steps());
    let constants = RejectionConstants::unit(bench.steps(), Some(3 * bench.steps()));
    let base = base_sample(&model, 100, 13).unwrap();
    for strategy in Strategy::ALL {
        let records = diffrs_sample(
            &model,
            &trivial,
            &constants,
            &SampleOptions::new(strategy, 100, 13),
        )
        .unwrap();
        for (r, b) in records.iter().zip(&base) {
            assert_eq!(r.x, b.x, "{strategy}");
            assert_eq!(r.nfe_model, bench.steps(), "{strategy}");
        }
    }
}
