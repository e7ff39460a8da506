//! Data-parallel against sequential batch execution: buffer delivery on the
//! destination and whole-map iteration.

use std::hint::black_box;
use std::sync::atomic::{AtomicU64, Ordering};

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use diht::bench::{prefill, run_ops_workload, BenchConfig, Mode};
use diht::{Cluster, DistributedMap, Execution, MapConfig};

const LOCALES: usize = 4;
const TASKS: usize = 4;

fn map_with(execution: Execution) -> DistributedMap<u64, u64> {
    let cluster = Cluster::spawn(LOCALES, TASKS).expect("cluster");
    let config = MapConfig {
        buffer_size: 1024,
        execution,
        ..MapConfig::default()
    };
    DistributedMap::new(&cluster, config).expect("map")
}

fn async_ops(c: &mut Criterion) {
    let mut group = c.benchmark_group("async_ops");
    let ops = 100_000u64;
    group.throughput(Throughput::Elements(ops));
    group.sample_size(10);
    for execution in [Execution::Parallel, Execution::Sequential] {
        let map = map_with(execution);
        let cfg = BenchConfig {
            locales: LOCALES,
            tasks: TASKS,
            total_ops: ops,
            key_bits: 16,
            mode: Mode::OpsAsync,
            map: map.config().clone(),
            ..BenchConfig::default()
        };
        prefill(&map, 0..cfg.key_range() as i128, |k| k as u64, 0);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{execution:?}")), &cfg, |b, cfg| {
            b.iter(|| black_box(run_ops_workload(&map, cfg).remote_dispatches))
        });
    }
    group.finish();
}

fn iteration(c: &mut Criterion) {
    let mut group = c.benchmark_group("parallel_iterate");
    let keys = 1u64 << 16;
    group.throughput(Throughput::Elements(keys));
    group.sample_size(10);
    for execution in [Execution::Parallel, Execution::Sequential] {
        let map = map_with(execution);
        prefill(&map, 0..keys as i128, |k| k as u64, 0);
        group.bench_function(BenchmarkId::from_parameter(format!("{execution:?}")), |b| {
            b.iter(|| {
                let sum = AtomicU64::new(0);
                map.parallel_iterate(|k, _| {
                    sum.fetch_add(*k, Ordering::Relaxed);
                });
                black_box(sum.into_inner())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, async_ops, iteration);
criterion_main!(benches);
