//! Triplet-family losses over an [`EmbeddingBatch`], cross-entropy over
//! classifier logits, the composite objective, and analytic gradients.
//!
//! The generalized batch-hard loss replaces the hardest positive and hardest
//! negative of each anchor with order statistics: the `k`-th largest positive
//! distance and the `p`-th smallest negative distance. `k = p = 1` is plain
//! batch-hard mining; larger `k` selects easier positives, larger `p` easier
//! negatives.

use std::cmp::Ordering;

use nalgebra::DMatrix;

use crate::batch::{
    pairwise_distances, pairwise_distances_with, prepared_rows, DistanceKind, DistanceMatrix,
    EmbeddingBatch, MetricConfig, NORM_EPS,
};
use crate::error::{PlaError, Result};
use crate::params::HyperParams;

/// Per-term values of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub softmax_term: f64,
    pub gbh_term: f64,
    pub total: f64,
}

/// Gradients of the composite objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGradient {
    /// With respect to the triplet-head embeddings, `N × d`.
    pub embeddings: DMatrix<f64>,
    /// With respect to the classifier logits, `N × C`.
    pub logits: DMatrix<f64>,
    pub breakdown: LossBreakdown,
}

/// The positive and negative picked for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// `D[anchor][positive] - D[anchor][negative]`.
    pub gap: f64,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted sum of the intra-class pull term and the triplet hinge over every
/// `(a, b, n)` with `a != b` sharing a label and `n` from another label.
pub fn lmnn_loss(batch: &EmbeddingBatch, mu: f64, margin: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(PlaError::invalid(format!(
            "mu must lie in [0, 1], got {mu}"
        )));
    }
    let dist = pairwise_distances(batch);
    let labels = batch.labels();
    let n = labels.len();
    let mut pull = 0.0;
    let mut push = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a == b || labels[a] != labels[b] {
                continue;
            }
            let dab = dist.get(a, b);
            pull += dab;
            for neg in 0..n {
                if labels[neg] != labels[a] {
                    push += (margin + dab - dist.get(a, neg)).max(0.0);
                }
            }
        }
    }
    Ok((1.0 - mu) * pull + mu * push)
}

fn require_triplet_shape(batch: &EmbeddingBatch) -> Result<()> {
    if batch.per_identity() < 2 || batch.identities() < 2 {
        return Err(PlaError::DegenerateBatch(format!(
            "need at least 2 identities with 2 samples each, got P={} K={}",
            batch.identities(),
            batch.per_identity()
        )));
    }
    Ok(())
}

/// Hinge of `margin + hardest positive - hardest negative`, summed over anchors.
pub fn batch_hard_loss(batch: &EmbeddingBatch, margin: f64) -> Result<f64> {
    require_triplet_shape(batch)?;
    let dist = pairwise_distances(batch);
    let terms = gbh_terms(&dist, batch.labels(), 1, 1)?;
    Ok(terms.iter().map(|t| (margin + t).max(0.0)).sum())
}

/// Per-anchor order-statistic selection. Positives exclude the anchor itself;
/// `k` and `p` are clamped to the number of available positives/negatives.
/// Equal distances are ordered by ascending sample index.
pub fn gbh_selections(
    dist: &DistanceMatrix,
    labels: &[usize],
    k: usize,
    p: usize,
) -> Result<Vec<Selection>> {
    if k == 0 || p == 0 {
        return Err(PlaError::invalid(format!(
            "k and p must be >= 1, got k={k} p={p}"
        )));
    }
    if dist.len() != labels.len() {
        return Err(PlaError::invalid(format!(
            "distance matrix is {}x{} but there are {} labels",
            dist.len(),
            dist.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        positives.clear();
        negatives.clear();
        for j in 0..n {
            if j == a {
                continue;
            }
            let entry = (dist.get(a, j), j);
            if labels[j] == labels[a] {
                positives.push(entry);
            } else {
                negatives.push(entry);
            }
        }
        if positives.is_empty() || negatives.is_empty() {
            return Err(PlaError::DegenerateBatch(format!(
                "anchor {a} has {} positives and {} negatives",
                positives.len(),
                negatives.len()
            )));
        }
        let kk = k.min(positives.len()) - 1;
        let pp = p.min(negatives.len()) - 1;
        // Largest first; ties by lowest index.
        let (_, &mut (dpos, bpos), _) =
            positives.select_nth_unstable_by(kk, |x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        // Smallest first; ties by lowest index.
        let (_, &mut (dneg, bneg), _) = negatives.select_nth_unstable_by(pp, cmp_ascending);
        out.push(Selection {
            anchor: a,
            positive: bpos,
            negative: bneg,
            gap: dpos - dneg,
        });
    }
    Ok(out)
}

fn cmp_ascending(x: &(f64, usize), y: &(f64, usize)) -> Ordering {
    x.0.total_cmp(&y.0).then(x.1.cmp(&y.1))
}

/// `T_{k,p}` for each anchor: k-th largest positive distance minus p-th
/// smallest negative distance.
pub fn gbh_terms(dist: &DistanceMatrix, labels: &[usize], k: usize, p: usize) -> Result<Vec<f64>> {
    Ok(gbh_selections(dist, labels, k, p)?
        .into_iter()
        .map(|s| s.gap)
        .collect())
}

/// Generalized batch-hard loss: `Σ_a softplus(margin + T_{k,p}(a))`.
pub fn gbh_loss(batch: &EmbeddingBatch, w: &HyperParams) -> Result<f64> {
    gbh_loss_with(batch, w, &MetricConfig::default())
}

pub fn gbh_loss_with(batch: &EmbeddingBatch, w: &HyperParams, cfg: &MetricConfig) -> Result<f64> {
    let dist = pairwise_distances_with(batch.embeddings(), cfg);
    let sel = gbh_selections(&dist, batch.labels(), w.k, w.p)?;
    Ok(sel.iter().map(|s| softplus(w.margin + s.gap)).sum())
}

/// Generalized batch-hard loss and its gradient with respect to the raw
/// (un-normalized) embeddings.
pub fn gbh_loss_grad(
    batch: &EmbeddingBatch,
    w: &HyperParams,
    cfg: &MetricConfig,
) -> Result<(f64, DMatrix<f64>)> {
    let emb = batch.embeddings();
    let rows = prepared_rows(emb, cfg.normalize);
    let dist = pairwise_distances_with(emb, cfg);
    let sel = gbh_selections(&dist, batch.labels(), w.k, w.p)?;

    let (n, d) = emb.shape();
    let mut grad_rows = vec![vec![0.0; d]; n];
    let mut loss = 0.0;
    for s in &sel {
        let z = w.margin + s.gap;
        loss += softplus(z);
        let weight = sigmoid(z);
        accumulate_distance_grad(
            &mut grad_rows,
            &rows,
            &dist,
            cfg.distance,
            s.anchor,
            s.positive,
            weight,
        );
        accumulate_distance_grad(
            &mut grad_rows,
            &rows,
            &dist,
            cfg.distance,
            s.anchor,
            s.negative,
            -weight,
        );
    }

    if cfg.normalize {
        // Chain through x / |x|: (I - r rᵀ) g / |x|.
        for (i, g) in grad_rows.iter_mut().enumerate() {
            let norm = emb.row(i).norm().max(NORM_EPS);
            let r = &rows[i];
            let dot: f64 = r.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for (gj, rj) in g.iter_mut().zip(r) {
                *gj = (*gj - rj * dot) / norm;
            }
        }
    }
    let grad = DMatrix::from_fn(n, d, |i, j| grad_rows[i][j]);
    Ok((loss, grad))
}

/// Adds `weight * ∂D(i, j)` to rows `i` and `j`.
fn accumulate_distance_grad(
    grad: &mut [Vec<f64>],
    rows: &[Vec<f64>],
    dist: &DistanceMatrix,
    kind: DistanceKind,
    i: usize,
    j: usize,
    weight: f64,
) {
    let scale = match kind {
        DistanceKind::Euclidean => weight / dist.get(i, j).max(NORM_EPS),
        DistanceKind::SquaredEuclidean => 2.0 * weight,
    };
    for c in 0..rows[i].len() {
        let diff = scale * (rows[i][c] - rows[j][c]);
        grad[i][c] += diff;
        grad[j][c] -= diff;
    }
}

fn check_logits(logits: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(PlaError::invalid(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(PlaError::invalid("empty batch"));
    }
    let classes = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(PlaError::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(PlaError::invalid("non-finite logit"));
    }
    Ok(())
}

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy_loss(logits: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_logits(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| log_sum_exp(logits.row(i).iter().copied()) - logits[(i, l)])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy_grad(logits: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    check_logits(logits, labels)?;
    let n = labels.len() as f64;
    let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let lse = log_sum_exp(logits.row(i).iter().copied());
        total += lse - logits[(i, l)];
        for c in 0..logits.ncols() {
            grad[(i, c)] = (logits[(i, c)] - lse).exp() / n;
        }
        grad[(i, l)] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

/// `cross_entropy + lambda * gbh_loss`.
pub fn composite_loss(
    batch: &EmbeddingBatch,
    logits: &DMatrix<f64>,
    w: &HyperParams,
) -> Result<LossBreakdown> {
    composite_loss_with(batch, logits, w, &MetricConfig::default())
}

pub fn composite_loss_with(
    batch: &EmbeddingBatch,
    logits: &DMatrix<f64>,
    w: &HyperParams,
    cfg: &MetricConfig,
) -> Result<LossBreakdown> {
    let softmax_term = cross_entropy_loss(logits, batch.labels())?;
    let gbh_term = gbh_loss_with(batch, w, cfg)?;
    Ok(LossBreakdown {
        softmax_term,
        gbh_term,
        total: softmax_term + w.lambda * gbh_term,
    })
}

/// Analytic gradient of [`composite_loss`]. At order-statistic ties the
/// lowest-index pair carries the whole subgradient.
pub fn composite_loss_grad(
    batch: &EmbeddingBatch,
    logits: &DMatrix<f64>,
    w: &HyperParams,
) -> Result<CompositeGradient> {
    composite_loss_grad_with(batch, logits, w, &MetricConfig::default())
}

pub fn composite_loss_grad_with(
    batch: &EmbeddingBatch,
    logits: &DMatrix<f64>,
    w: &HyperParams,
    cfg: &MetricConfig,
) -> Result<CompositeGradient> {
    let (softmax_term, logit_grad) = cross_entropy_grad(logits, batch.labels())?;
    let (gbh_term, mut emb_grad) = gbh_loss_grad(batch, w, cfg)?;
    emb_grad *= w.lambda;
    Ok(CompositeGradient {
        embeddings: emb_grad,
        logits: logit_grad,
        breakdown: LossBreakdown {
            softmax_term,
            gbh_term,
            total: softmax_term + w.lambda * gbh_term,
        },
    })
}
