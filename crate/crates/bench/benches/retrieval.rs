// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use duch_core::hamming::PackedCodeIndex;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random_codes(rng: &mut ChaCha8Rng, n: usize, bits: usize) -> Array2<i8> {
    Array2::from_shape_fn((n, bits), |_| if rng.random_bool(0.5) { 1 } else { -1 })
}

fn top_k(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("top_k");
    for bits in [16, 64, 128] {
        let db =
            PackedCodeIndex::pack_anonymous(random_codes(&mut rng, 100_000, bits).view()).unwrap();
        let q = PackedCodeIndex::pack_anonymous(random_codes(&mut rng, 1, bits).view()).unwrap();
        group.bench_with_input(BenchmarkId::new("single", bits), &bits, |b, _| {
            b.iter(|| db.top_k(black_box(q.row(0)), 20).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sharded4", bits), &bits, |b, _| {
            b.iter(|| db.top_k_sharded(black_box(q.row(0)), 20, 4).unwrap())
        });
    }
    group.finish();
}

fn search_all(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let db = PackedCodeIndex::pack_anonymous(random_codes(&mut rng, 10_000, 64).view()).unwrap();
    let qs = PackedCodeIndex::pack_anonymous(random_codes(&mut rng, 100, 64).view()).unwrap();
    c.bench_function("search_all_100x10k_b64", |b| {
        b.iter(|| db.search_all(black_box(&qs), 200).unwrap())
    });
}

criterion_group!(benches, top_k, search_all);
criterion_main!(benches);
