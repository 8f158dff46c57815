// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, Criterion};
use duch_core::data::{generate_synthetic, SyntheticSpec};
use duch_core::objectives::{contrastive_total_with_grad, ContrastiveConfig};
use duch_core::trainer::{init_training, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn contrastive(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut h = || Array2::from_shape_fn((256, 64), |_| rng.random_range(-0.99..0.99));
    let (f, g, fa, ga) = (h(), h(), h(), h());
    let cfg = ContrastiveConfig::default();
    c.bench_function("contrastive_total_m256_b64", |b| {
        b.iter(|| {
            contrastive_total_with_grad(black_box(f.view()), g.view(), fa.view(), ga.view(), &cfg)
                .unwrap()
        })
    });
}

fn train_batch(c: &mut Criterion) {
    let ds = generate_synthetic(&SyntheticSpec {
        num_classes: 10,
        per_class: 30,
        dim_img: 32,
        dim_txt: 48,
        noise_sigma: 0.05,
        seed: 4,
    })
    .unwrap();
    let cfg = TrainConfig {
        code_len: 16,
        batch_size: 256,
        seed: 4,
        ..Default::default()
    };
    let mut state = init_training(&ds, &cfg).unwrap();
    let idx: Vec<usize> = (0..256).collect();
    c.bench_function("train_batch_m256_b16", |b| {
        b.iter(|| state.train_batch(black_box(&idx)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = contrastive, train_batch
}
criterion_main!(benches);
