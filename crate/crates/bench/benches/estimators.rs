use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use std::hint::black_box;
use toolgate_core::estimators::{cross_val_oof, train_mlp, MlpSpec, Standardizer};

fn blobs(n: usize, d: usize) -> (Array2<f64>, Vec<bool>) {
    // Deterministic pseudo-noise keeps the bench free of extra dependencies.
    let mut s = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let x = Array2::from_shape_fn((n, d), |(i, j)| {
        let shift = if j == 0 && y[i] { 3.0 } else { 0.0 };
        shift + 2.0 * next()
    });
    (x, y)
}

fn estimators(c: &mut Criterion) {
    let (x, y) = blobs(500, 64);
    let z = Standardizer::fit(x.view())
        .unwrap()
        .apply(x.view())
        .unwrap();
    let mut group = c.benchmark_group("estimators");
    group.sample_size(10);
    for hidden in [&[][..], &[128][..], &[128, 64][..]] {
        let spec = MlpSpec::new(hidden, 1e-3);
        group.bench_function(format!("train {}", spec.label()), |b| {
            b.iter(|| train_mlp(black_box(z.view()), &y, &spec, 42).unwrap())
        });
    }
    let spec = MlpSpec::new(&[], 1e-3);
    group.bench_function("cross_val_oof linear", |b| {
        b.iter(|| cross_val_oof(black_box(x.view()), &y, &spec, 5, 42).unwrap())
    });
    group.finish();
}

criterion_group!(benches, estimators);
criterion_main!(benches);
