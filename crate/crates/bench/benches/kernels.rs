use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use forec_core::config::{Mode, TrainConfig};
use forec_core::dataset::Dataset;
use forec_core::optim::SgdState;
use forec_core::{ops, trainer, Network, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn filled(shape: [usize; 4], salt: usize) -> Tensor {
    let mut i = salt;
    Tensor::from_fn(shape, |_| {
        i = i.wrapping_mul(2_654_435_761).wrapping_add(12_345);
        (i % 1000) as f32 / 1000.0 - 0.5
    })
}

fn conv(c: &mut Criterion) {
    let x = filled([4, 16, 32, 32], 1);
    let w = filled([16, 16, 3, 3], 2);
    let b = Tensor::zeros([16]);
    c.bench_function("conv2d 4x16x32x32 k3", |bench| {
        bench.iter(|| ops::conv2d(black_box(&x), black_box(&w), Some(&b), 1, 1).unwrap())
    });
    let g = filled([4, 16, 32, 32], 3);
    c.bench_function("conv2d_backward 4x16x32x32 k3", |bench| {
        bench.iter(|| ops::conv2d_backward(black_box(&x), black_box(&w), true, 1, 1, black_box(&g), true).unwrap())
    });
}

fn step(c: &mut Criterion) {
    let data = Dataset::generate(16, 4, 64, 64, 3, 0).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for mode in [Mode::Supervised, Mode::Baseline, Mode::Forec] {
        let mut cfg = TrainConfig::default();
        cfg.train.mode = mode;
        let (mut s, mut t) = Network::build(cfg.net, mode.aux_head(), 0).unwrap();
        let mut sgd = SgdState::new(cfg.optim, s.params());
        let l = vec![data.sample(0), data.sample(1), data.sample(2), data.sample(3)];
        let u = vec![data.sample(4), data.sample(5), data.sample(6), data.sample(7)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        group.bench_function(mode.name(), |bench| {
            bench.iter(|| trainer::train_step(&mut s, &mut t, &mut sgd, &l, &u, &cfg, 0, 1000, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, step);
criterion_main!(benches);
