use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sls_core::error_model::s_slope_with;
use sls_core::exec::Execution;
use sls_core::experiment::{build_designs, run_batch, ExperimentConfig, PD, ROBUST_QUADRATIC};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn slope_scan(c: &mut Criterion) {
    let mut config = ExperimentConfig::new(7);
    config.steps = Some(1500);
    let data = config.training_dataset().unwrap();
    let sys = config.plant().unwrap();
    let mut group = c.benchmark_group("slope_pair_scan");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, data.len()), &exec, |b, &exec| {
            b.iter(|| s_slope_with(black_box(&data), &sys.c, 5.0, 0.95, exec).unwrap())
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut config = ExperimentConfig::new(7);
    config.runs = 16;
    config.steps = Some(600);
    let fit = config.fit().unwrap();
    let (_, designs) = build_designs(&config, &fit).unwrap();
    let mut group = c.benchmark_group("monte_carlo_runs");
    group.sample_size(10);
    for design in designs.iter().filter(|d| d.name == PD || d.name == ROBUST_QUADRATIC) {
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, &design.name), &exec, |b, &exec| {
                b.iter(|| run_batch(&config, black_box(&design.controller), design.gamma, 4.0, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, slope_scan, monte_carlo);
criterion_main!(benches);
