//! Independent oracles and random-instance builders shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::DMatrix;
use pla_core::batch::{pairwise_distances, DistanceMatrix, EmbeddingBatch};
use pla_core::bayes::GpState;
use pla_core::loss::{composite_loss, composite_loss_grad};
use pla_core::model::{ModelShape, ToyModel};
use pla_core::params::HyperParams;
use rand::Rng;

/// Balanced labels `0..p`, `k` of each, in shuffled row order.
pub fn random_labels<R: Rng>(p: usize, k: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    labels.shuffle(rng);
    labels
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Per-anchor `T` by fully sorting the positive and negative distance lists.
pub fn gbh_terms_oracle(dist: &DistanceMatrix, labels: &[usize], k: usize, p: usize) -> Vec<f64> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let mut pos: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != a && labels[j] == labels[a])
                .map(|j| (dist.get(a, j), j))
                .collect();
            let mut neg: Vec<(f64, usize)> = (0..n)
                .filter(|&j| labels[j] != labels[a])
                .map(|j| (dist.get(a, j), j))
                .collect();
            pos.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            neg.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            pos[k.min(pos.len()) - 1].0 - neg[p.min(neg.len()) - 1].0
        })
        .collect()
}

/// `max positive - min negative` per anchor, by direct scan.
pub fn batch_hard_terms_oracle(dist: &DistanceMatrix, labels: &[usize]) -> Vec<f64> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let mut hardest_pos = f64::NEG_INFINITY;
            let mut hardest_neg = f64::INFINITY;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    hardest_pos = hardest_pos.max(dist.get(a, j));
                } else {
                    hardest_neg = hardest_neg.min(dist.get(a, j));
                }
            }
            hardest_pos - hardest_neg
        })
        .collect()
}

/// Smallest separation between each anchor's selected order statistic and
/// its neighbours in the sorted lists; large values mean the selection is
/// stable under small perturbations.
pub fn selection_separation(dist: &DistanceMatrix, labels: &[usize], k: usize, p: usize) -> f64 {
    let n = labels.len();
    let mut worst = f64::INFINITY;
    for a in 0..n {
        let mut pos: Vec<f64> = (0..n)
            .filter(|&j| j != a && labels[j] == labels[a])
            .map(|j| dist.get(a, j))
            .collect();
        let mut neg: Vec<f64> = (0..n)
            .filter(|&j| labels[j] != labels[a])
            .map(|j| dist.get(a, j))
            .collect();
        pos.sort_by(|x, y| y.partial_cmp(x).unwrap());
        neg.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (list, r) in [(&pos, k.min(pos.len()) - 1), (&neg, p.min(neg.len()) - 1)] {
            if r > 0 {
                worst = worst.min((list[r] - list[r - 1]).abs());
            }
            if r + 1 < list.len() {
                worst = worst.min((list[r + 1] - list[r]).abs());
            }
        }
        for &d in pos.iter().chain(&neg) {
            worst = worst.min(d);
        }
    }
    worst
}

/// Retrieval metrics by explicit rank counting: the rank of gallery item
/// `g` is one plus the number of items strictly closer, or equally close
/// with a lower index.
pub struct RetrievalOracle {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub excluded: usize,
}

pub fn retrieval_oracle(
    q: &DMatrix<f64>,
    ql: &[usize],
    g: &DMatrix<f64>,
    gl: &[usize],
) -> Option<RetrievalOracle> {
    let ng = g.nrows();
    let dist = |i: usize, j: usize| -> f64 {
        (0..q.ncols())
            .map(|c| (q[(i, c)] - g[(j, c)]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut first_hit_counts = vec![0usize; ng];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for i in 0..q.nrows() {
        let d: Vec<f64> = (0..ng).map(|j| dist(i, j)).collect();
        let rank = |j: usize| {
            1 + (0..ng)
                .filter(|&o| d[o] < d[j] || (d[o] == d[j] && o < j))
                .count()
        };
        let mut relevant: Vec<usize> = (0..ng).filter(|&j| gl[j] == ql[i]).map(rank).collect();
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        relevant.sort_unstable();
        evaluated += 1;
        first_hit_counts[relevant[0] - 1] += 1;
        let mut precision = 0.0;
        for (h, &r) in relevant.iter().enumerate() {
            precision += (h + 1) as f64 / r as f64;
        }
        ap_sum += precision / relevant.len() as f64;
    }
    if evaluated == 0 {
        return None;
    }
    let mut acc = 0usize;
    let cmc = first_hit_counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / evaluated as f64
        })
        .collect();
    Some(RetrievalOracle {
        cmc,
        map: ap_sum / evaluated as f64,
        excluded,
    })
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let pv = a[col][col];
        for v in a[col].iter_mut() {
            *v /= pv;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// The normalized Gaussian kernel written out from its formula.
pub fn kernel_oracle(x: &[f64; 4], y: &[f64; 4], bw: &[f64]) -> f64 {
    let det: f64 = bw.iter().product();
    let quad: f64 = (0..4).map(|j| (x[j] - y[j]).powi(2) / bw[j]).sum();
    (2.0 * std::f64::consts::PI).powi(-2) / det.sqrt() * (-0.5 * quad).exp()
}

/// Posterior mean and (unclamped) variance with an explicit Gram inverse.
pub fn gp_oracle(state: &GpState, jitter: f64, cand: &HyperParams) -> (f64, f64) {
    let pts: Vec<[f64; 4]> = state.points().iter().map(|w| w.to_array()).collect();
    let bw = state.bandwidth();
    let n = pts.len();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| kernel_oracle(&pts[i], &pts[j], bw) + if i == j { jitter } else { 0.0 })
                .collect()
        })
        .collect();
    let inv = gauss_jordan_inverse(&gram);
    let c = cand.to_array();
    let kx: Vec<f64> = pts.iter().map(|p| kernel_oracle(&c, p, bw)).collect();
    let mu = state.mean_level();
    let resid: Vec<f64> = state.values().iter().map(|v| v - mu).collect();
    let mut mean = mu;
    let mut reduction = 0.0;
    for i in 0..n {
        for j in 0..n {
            mean += kx[i] * inv[i][j] * resid[j];
            reduction += kx[i] * inv[i][j] * kx[j];
        }
    }
    (mean, kernel_oracle(&c, &c, bw) - reduction)
}

/// `max |a - b| / max(|a|_inf, |b|_inf)` over flattened gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Composite loss of a model on one batch.
pub fn model_loss(model: &ToyModel, x: &DMatrix<f64>, labels: &[usize], w: &HyperParams) -> f64 {
    let pass = model.forward(x).unwrap();
    let batch = EmbeddingBatch::new(pass.triplet.clone(), labels.to_vec()).unwrap();
    composite_loss(&batch, &pass.logits, w).unwrap().total
}

/// Analytic parameter gradient of [`model_loss`], flattened block by block.
pub fn model_grad(
    model: &ToyModel,
    x: &DMatrix<f64>,
    labels: &[usize],
    w: &HyperParams,
) -> Vec<f64> {
    let pass = model.forward(x).unwrap();
    let batch = EmbeddingBatch::new(pass.triplet.clone(), labels.to_vec()).unwrap();
    let g = composite_loss_grad(&batch, &pass.logits, w).unwrap();
    let grads = model.backward(x, &pass, &g.embeddings, &g.logits);
    grads
        .blocks()
        .iter()
        .flat_map(|b| b.iter().copied().collect::<Vec<_>>())
        .collect()
}

/// Central differences of [`model_loss`] over every parameter.
pub fn model_grad_fd(
    model: &ToyModel,
    x: &DMatrix<f64>,
    labels: &[usize],
    w: &HyperParams,
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..8 {
        let len = model.blocks()[b].len();
        for i in 0..len {
            let mut plus = model.clone();
            plus.blocks_mut()[b].as_mut_slice()[i] += h;
            let mut minus = model.clone();
            minus.blocks_mut()[b].as_mut_slice()[i] -= h;
            out.push(
                (model_loss(&plus, x, labels, w) - model_loss(&minus, x, labels, w)) / (2.0 * h),
            );
        }
    }
    out
}

/// Central differences of the composite loss over embeddings and logits.
pub fn composite_grad_fd(
    emb: &DMatrix<f64>,
    logits: &DMatrix<f64>,
    labels: &[usize],
    w: &HyperParams,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let f = |e: &DMatrix<f64>, l: &DMatrix<f64>| {
        let b = EmbeddingBatch::new(e.clone(), labels.to_vec()).unwrap();
        composite_loss(&b, l, w).unwrap().total
    };
    let mut ge = Vec::with_capacity(emb.len());
    for i in 0..emb.len() {
        let mut p = emb.clone();
        p.as_mut_slice()[i] += h;
        let mut m = emb.clone();
        m.as_mut_slice()[i] -= h;
        ge.push((f(&p, logits) - f(&m, logits)) / (2.0 * h));
    }
    let mut gl = Vec::with_capacity(logits.len());
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p.as_mut_slice()[i] += h;
        let mut m = logits.clone();
        m.as_mut_slice()[i] -= h;
        gl.push((f(emb, &p) - f(emb, &m)) / (2.0 * h));
    }
    (ge, gl)
}

/// Distance matrix of a batch, for callers that only hold rows and labels.
pub fn distances(emb: &DMatrix<f64>, labels: &[usize]) -> DistanceMatrix {
    pairwise_distances(&EmbeddingBatch::new(emb.clone(), labels.to_vec()).unwrap())
}

/// Smallest |pre-activation| of the trunk on `x`.
pub fn relu_margin(model: &ToyModel, x: &DMatrix<f64>) -> f64 {
    model
        .forward(x)
        .unwrap()
        .pre_activation
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

pub fn tiny_shape(classes: usize) -> ModelShape {
    ModelShape {
        input_dim: 5,
        hidden_dim: 6,
        head_dim: 3,
        classes,
    }
}
