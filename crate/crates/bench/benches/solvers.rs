use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fusekit::matching::{hungarian, match_models, sinkhorn_log};
use fusekit::SolverConfig;
use fusekit_bench::{clone_pair, random_square};

fn assignment(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for n in [16, 32, 64, 128] {
        let cost = random_square(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| {
            b.iter(|| hungarian(black_box(cost)).unwrap())
        });
    }
    group.finish();
}

fn sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn_log");
    for n in [16, 32, 64, 128] {
        let scores = random_square(n, 100 + n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &scores, |b, s| {
            b.iter(|| sinkhorn_log(black_box(s), 0.1, 50, 1e-9).unwrap())
        });
    }
    group.finish();
}

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("match_models");
    group.sample_size(10);
    for width in [8, 16, 32] {
        let (g, s) = clone_pair(64, width, 10, 100, width as u64);
        let cfg = SolverConfig::default();
        group.bench_with_input(BenchmarkId::from_parameter(width), &(g, s), |b, (g, s)| {
            b.iter(|| match_models(black_box(g), black_box(s), &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, assignment, sinkhorn, matching);
criterion_main!(benches);
