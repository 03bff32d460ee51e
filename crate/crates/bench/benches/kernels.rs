use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use ensyth_bench::{blobs, layer, random_matrix, trained, votes};
use ensyth_core::ensemble::{backward_eliminate_by, ensemble_accuracy};
use ensyth_core::network::{forward, predict};
use ensyth_core::pruner::prune_layer;
use ensyth_core::tensor::{matmul, matmul_tn};
use ensyth_core::{Ensemble, ModelBundle};
use std::hint::black_box;

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        g.bench_with_input(BenchmarkId::new("nn", n), &n, |bch, _| bch.iter(|| matmul(black_box(&a), black_box(&b))));
        g.bench_with_input(BenchmarkId::new("tn", n), &n, |bch, _| {
            bch.iter(|| matmul_tn(black_box(&a), black_box(&b)))
        });
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let ds = blobs(10);
    let net = trained(&ds);
    // 50 samples: the inference batch used for timing
    let x = ds.features().select_columns(&(0..50).collect::<Vec<_>>());
    c.bench_function("forward_50", |b| b.iter(|| forward(&net, black_box(&x))));
    c.bench_function("predict_50", |b| b.iter(|| predict(&net, black_box(&x))));
}

fn bench_prune(c: &mut Criterion) {
    let ds = blobs(40);
    let net = trained(&ds);
    let mut g = c.benchmark_group("prune_layer");
    g.sample_size(10);
    for l in 0..net.depth() {
        let (w, data) = layer(&net, &ds, l);
        g.bench_with_input(BenchmarkId::new("eps_0.1", l), &l, |b, _| {
            b.iter(|| prune_layer(black_box(&w), black_box(&data), 0.1))
        });
    }
    g.finish();
}

fn bench_vote(c: &mut Criterion) {
    let (v, truth) = votes(12, 500, 5);
    let full = Ensemble::full(12).unwrap();
    c.bench_function("ensemble_accuracy_12x500", |b| b.iter(|| ensemble_accuracy(&full, black_box(&v), &truth)));
    let nnz = vec![1; 12];
    c.bench_function("backward_eliminate_12x500", |b| {
        b.iter(|| backward_eliminate_by(black_box(&v), &truth, &nnz))
    });
}

fn bench_bundle(c: &mut Criterion) {
    let net = trained(&blobs(10));
    c.bench_function("bundle_encode", |b| {
        b.iter_batched(
            || ModelBundle::from_network(&net, None).unwrap(),
            |bundle| bundle.to_bytes().unwrap(),
            BatchSize::SmallInput,
        )
    });
    let bytes = ModelBundle::from_network(&net, None).unwrap().to_bytes().unwrap();
    c.bench_function("bundle_decode", |b| {
        b.iter(|| ModelBundle::from_bytes(black_box(&bytes), None).unwrap().decode())
    });
}

criterion_group!(benches, bench_matmul, bench_forward, bench_prune, bench_vote, bench_bundle);
criterion_main!(benches);
