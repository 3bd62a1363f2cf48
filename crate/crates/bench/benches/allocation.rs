use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use toolgate_core::affordability::{ndcg_at_k, oracle_topk, remaining_calls};
use toolgate_core::trace::synth::synth_trace;
use toolgate_core::trace::synth::SynthConfig;

fn allocation(c: &mut Criterion) {
    let mut group = c.benchmark_group("allocation");
    for n in [500usize, 5_000, 50_000] {
        let cfg = SynthConfig {
            n,
            ..SynthConfig::default()
        };
        let ts = synth_trace(&cfg, 42).expect("synthetic trace").trace;
        let k = n / 4;
        group.bench_with_input(BenchmarkId::new("oracle_topk", n), &ts, |b, ts| {
            b.iter(|| oracle_topk(black_box(ts), k, 1e-9).unwrap())
        });
        let sel = oracle_topk(&ts, k, 1e-9).unwrap().selection;
        group.bench_with_input(BenchmarkId::new("ndcg", n), &ts, |b, ts| {
            b.iter(|| ndcg_at_k(black_box(ts), &sel, k).unwrap())
        });
    }
    group.bench_function("remaining_calls", |b| {
        b.iter(|| {
            (0..401u64)
                .map(|n| remaining_calls(black_box(10_000.0), 25.0, n).unwrap())
                .sum::<u64>()
        })
    });
    group.finish();
}

criterion_group!(benches, allocation);
criterion_main!(benches);
