use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diffrs_core::*;

fn mixture_densities(c: &mut Criterion) {
    let bench = benchmark::ring_2d().unwrap();
    let q = MixtureDiffusion::new(&bench.q0, &bench.schedule).unwrap();
    let oracle = bench.oracle().unwrap();
    let x = [0.7, -1.1];
    c.bench_function("ring log_density", |b| {
        b.iter(|| bench.q0.log_density(black_box(&x)).unwrap())
    });
    c.bench_function("ring posterior_log_density t=10", |b| {
        b.iter(|| {
            q.posterior_log_density(10, black_box(&x), black_box(&[0.6, -1.0]))
                .unwrap()
        })
    });
    c.bench_function("ring oracle log_ratio t=10", |b| {
        b.iter(|| oracle.log_ratio(black_box(&x), 10).unwrap())
    });
}

fn transitions(c: &mut Criterion) {
    let bench = benchmark::ring_2d().unwrap();
    let model = bench.model().unwrap();
    let mut rng = chain_rng(1, 0);
    c.bench_function("ring model_transition t=10", |b| {
        b.iter(|| {
            model
                .model_transition(10, black_box(&[0.7, -1.1]), &mut rng)
                .unwrap()
        })
    });
}

fn sampling(c: &mut Criterion) {
    let bench = benchmark::ring_2d().unwrap();
    let model = bench.model().unwrap();
    let oracle = bench.oracle().unwrap();
    let calibration = calibrate_constants(&model, &oracle, 500, 85.0, Some(96), 1).unwrap();
    let mut group = c.benchmark_group("sample 200 chains");
    group.sample_size(10);
    group.bench_function("base", |b| b.iter(|| base_sample(&model, 200, 2).unwrap()));
    for strategy in [Strategy::FullDiffRS, Strategy::MarginalSequential] {
        group.bench_with_input(BenchmarkId::from_parameter(strategy), &strategy, |b, s| {
            b.iter(|| {
                diffrs_sample(
                    &model,
                    &oracle,
                    &calibration.constants,
                    &SampleOptions::new(*s, 200, 2),
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, mixture_densities, transitions, sampling);
criterion_main!(benches);
