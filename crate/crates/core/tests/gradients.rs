mod common;

use common::*;
use pla_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn model_backprop_matches_central_differences() {
    let mut checked = 0;
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(3, 2, &mut rng);
        let model = ToyModel::init(tiny_shape(4), &mut rng).unwrap();
        let x = random_matrix(6, 5, 1.0, &mut rng);
        let w = HyperParams::new(0.7, 0.1, 2, 3).unwrap();
        let trip = model.forward(&x).unwrap().triplet;
        if relu_margin(&model, &x) < 1e-3
            || selection_separation(&distances(&trip, &labels), &labels, w.k, w.p) < 1e-3
        {
            continue;
        }
        let err = relative_error(
            &model_grad(&model, &x, &labels, &w),
            &model_grad_fd(&model, &x, &labels, &w, 1e-5),
        );
        assert!(err < 1e-4, "seed {seed}: {err:e}");
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn composite_gradient_matches_central_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let labels = random_labels(3, 3, &mut rng);
        let emb = random_matrix(9, 4, 1.0, &mut rng);
        let logits = random_matrix(9, 3, 2.0, &mut rng);
        let w = HyperParams::new(1.2, 0.05, 1, 2).unwrap();
        if selection_separation(&distances(&emb, &labels), &labels, w.k, w.p) < 1e-3 {
            continue;
        }
        let batch = EmbeddingBatch::new(emb.clone(), labels.clone()).unwrap();
        let g = composite_loss_grad(&batch, &logits, &w).unwrap();
        let (fe, fl) = composite_grad_fd(&emb, &logits, &labels, &w, 1e-5);
        let analytic: Vec<f64> = g
            .embeddings
            .iter()
            .chain(g.logits.iter())
            .copied()
            .collect();
        let numeric: Vec<f64> = fe.into_iter().chain(fl).collect();
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }
}
