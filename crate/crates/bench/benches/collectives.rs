use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use wagma::collective::butterfly_allreduce;
use wagma::collective::scenario::run_scenario;
use wagma::optim::{run_training, Algorithm};
use wagma::topology::compute_groups;
use wagma::GroupingParams;
use wagma_bench::{buffers, quadratic, scenario, straggler_delay, training};

fn grouping(c: &mut Criterion) {
    let mut group = c.benchmark_group("compute_groups");
    for p in [64usize, 1024] {
        let params = GroupingParams::new(p, 8, 3).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(p), &params, |b, &params| {
            b.iter(|| compute_groups(black_box(params)))
        });
    }
    group.finish();
}

fn allreduce(c: &mut Criterion) {
    let mut group = c.benchmark_group("butterfly_allreduce");
    for p in [8usize, 64] {
        let bufs = buffers(p, 256);
        group.bench_with_input(BenchmarkId::from_parameter(p), &bufs, |b, bufs| {
            b.iter(|| butterfly_allreduce(black_box(bufs)))
        });
    }
    group.finish();
}

fn group_collective(c: &mut Criterion) {
    let mut group = c.benchmark_group("wait_avoiding_scenario");
    for (p, s) in [(16usize, 4usize), (64, 8)] {
        let cfg = scenario(p, s);
        group.bench_with_input(BenchmarkId::new(format!("P{p}"), s), &cfg, |b, cfg| {
            b.iter(|| run_scenario(black_box(cfg)).unwrap())
        });
    }
    group.finish();
}

fn training_runs(c: &mut Criterion) {
    let problem = quadratic(64);
    let delay = straggler_delay();
    let mut group = c.benchmark_group("run_training");
    group.sample_size(10);
    for algorithm in [Algorithm::Wagma, Algorithm::Allreduce, Algorithm::LocalSgd] {
        let cfg = training(algorithm, 16, 50);
        group.bench_function(algorithm.name(), |b| {
            b.iter(|| run_training(black_box(&cfg), problem.as_ref(), &delay, 1).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, grouping, allreduce, group_collective, training_runs);
criterion_main!(benches);
