use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use frametree::analysis::{brute_force_oracle, predict_cost};
use frametree::{run_search, Algorithm, Backends, Schedule, SearchOptions, SyntheticLandscape};
use frametree_bench::config;

fn searches(c: &mut Criterion) {
    let mut group = c.benchmark_group("search");
    for &(n, t) in &[(4, 8), (8, 16), (16, 32)] {
        for alg in [Algorithm::Linear, Algorithm::Tof] {
            let cfg = config(alg, n, t, 7);
            let backends = Backends::synthetic(&cfg).unwrap();
            group.bench_with_input(
                BenchmarkId::new(format!("{alg:?}"), format!("N{n}xT{t}")),
                &cfg,
                |b, cfg| b.iter(|| run_search(black_box(cfg), &backends, &SearchOptions::default()).unwrap()),
            );
        }
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let land = SyntheticLandscape::from_seed(3);
    let schedule = Schedule::exhaustive(4, 6, 2);
    c.bench_function("oracle/N4xT6", |b| {
        b.iter(|| brute_force_oracle(&land, black_box(&schedule), 3).unwrap())
    });
}

fn prediction(c: &mut Criterion) {
    let schedule = Schedule::tof_default(16, 32);
    c.bench_function("predict_cost/N16xT32", |b| {
        b.iter(|| predict_cost(black_box(&schedule), Algorithm::Tof))
    });
}

criterion_group!(benches, searches, oracle, prediction);
criterion_main!(benches);
