//! Compares the parallel and sequential policy-enumeration backends.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use poslin::bellman::brute_force_costs_sequential;
use poslin::gen::{random_instance, GenConfig};

fn enumeration(c: &mut Criterion) {
    let mut group = c.benchmark_group("policy_enumeration");
    for n in [6usize, 8] {
        let cfg = GenConfig {
            n,
            actions_per_state: 2,
            seed: 42,
            ..GenConfig::default()
        };
        let inst = random_instance(&cfg);
        group.bench_with_input(BenchmarkId::new("sequential", n), &inst, |b, inst| {
            b.iter(|| brute_force_costs_sequential(inst, u128::MAX).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &inst, |b, inst| {
            b.iter(|| poslin::bellman::brute_force_costs_parallel(inst, u128::MAX).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, enumeration);
criterion_main!(benches);
