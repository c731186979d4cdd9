use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cgan_core::trainer::{train, TrainConfig};
use cgan_core::{StudyArm, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian_arm(id: &str, n: usize, d: usize, mean: f64, seed: u64) -> StudyArm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, 1.0).unwrap();
    let data: Vec<f64> = (0..n * d).map(|_| dist.sample(&mut rng)).collect();
    StudyArm::new(id, Tensor::matrix(n, d, data).unwrap()).unwrap()
}

fn bench_training_iterations(c: &mut Criterion) {
    let arms = vec![
        gaussian_arm("a1", 1024, 10, 0.2, 1),
        gaussian_arm("a2", 1024, 10, -0.2, 2),
    ];
    let cfg = TrainConfig { max_iters: 20, ..TrainConfig::default() };
    c.bench_function("train_20_iters_d10_m256", |b| {
        b.iter(|| black_box(train(&arms, &cfg).unwrap()))
    });
}

fn bench_gradients(c: &mut Criterion) {
    use cgan_core::nets::{sample_noise, Discriminator, Generator};
    use cgan_core::trainer::discriminator_loss;

    let gen = Generator::new(16, &[64, 64], 10, 0).unwrap();
    let disc = Discriminator::new(10, &[64, 64], 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = sample_noise(&mut rng, 256, 16);
    let x_gen = gen.sample(&z).unwrap();
    let x_data = sample_noise(&mut rng, 256, 10);
    c.bench_function("critic_loss_m256_d10", |b| {
        b.iter(|| black_box(discriminator_loss(&disc, &x_gen, &x_data).unwrap()))
    });
}

criterion_group!(benches, bench_training_iterations, bench_gradients);
criterion_main!(benches);
