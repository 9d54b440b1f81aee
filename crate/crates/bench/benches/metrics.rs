use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urdmu_core::metrics::{pr_ap, roc_auc};
use urdmu_core::topk::topk_rows;

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for frames in [10_000, 100_000] {
        let scores: Vec<f64> = (0..frames).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = (0..frames).map(|_| rng.random_range(0..2)).collect();
        c.bench_with_input(BenchmarkId::new("roc_auc", frames), &frames, |b, _| {
            b.iter(|| black_box(roc_auc(&scores, &labels).unwrap()))
        });
        c.bench_with_input(BenchmarkId::new("pr_ap", frames), &frames, |b, _| {
            b.iter(|| black_box(pr_ap(&scores, &labels).unwrap()))
        });
    }
    let row: Vec<f64> = (0..200).map(|_| rng.random_range(0..50) as f64).collect();
    c.bench_function("topk_rows_200_k13", |b| b.iter(|| black_box(topk_rows(&row, 13).unwrap())));
}

criterion_group!(benches, bench_metrics);
criterion_main!(benches);
