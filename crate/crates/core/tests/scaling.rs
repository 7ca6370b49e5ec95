use std::time::{Duration, Instant};

use pla_core::loss::gbh_loss_grad;
use pla_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(p: usize, k: usize, d: usize, seed: u64) -> EmbeddingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let emb = nalgebra::DMatrix::from_fn(p * k, d, |_, _| rng.random_range(-1.0..1.0));
    EmbeddingBatch::new(emb, labels).unwrap()
}

fn fastest(b: &EmbeddingBatch, w: &HyperParams) -> Duration {
    let cfg = MetricConfig::default();
    (0..7)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..20 {
                std::hint::black_box(gbh_loss_grad(b, w, &cfg).unwrap());
            }
            start.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn doubling_batch_stays_within_five_times() {
    let w = HyperParams::new(1.0, 0.2, 2, 4).unwrap();
    let small = batch(16, 8, 32, 1);
    let large = batch(32, 8, 32, 2);
    fastest(&small, &w);
    let ratio = fastest(&large, &w).as_secs_f64() / fastest(&small, &w).as_secs_f64();
    assert!(ratio < 5.0, "ratio {ratio:.2}");
}
