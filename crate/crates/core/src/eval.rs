//! Retrieval evaluation (CMC, Rank-1, mAP) and PCA post-processing of
//! embeddings.

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{PlaError, Result};

/// Query and gallery embeddings with their identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGallerySplit {
    query: DMatrix<f64>,
    query_labels: Vec<usize>,
    gallery: DMatrix<f64>,
    gallery_labels: Vec<usize>,
}

impl QueryGallerySplit {
    pub fn new(
        query: DMatrix<f64>,
        query_labels: Vec<usize>,
        gallery: DMatrix<f64>,
        gallery_labels: Vec<usize>,
    ) -> Result<Self> {
        if query.nrows() != query_labels.len() || gallery.nrows() != gallery_labels.len() {
            return Err(PlaError::invalid("row and label counts differ"));
        }
        if query.ncols() != gallery.ncols() {
            return Err(PlaError::invalid(format!(
                "query dimension {} differs from gallery dimension {}",
                query.ncols(),
                gallery.ncols()
            )));
        }
        if query_labels.is_empty() || gallery_labels.is_empty() {
            return Err(PlaError::invalid("query and gallery must be non-empty"));
        }
        Ok(Self {
            query,
            query_labels,
            gallery,
            gallery_labels,
        })
    }

    pub fn query(&self) -> &DMatrix<f64> {
        &self.query
    }

    pub fn gallery(&self) -> &DMatrix<f64> {
        &self.gallery
    }

    pub fn query_labels(&self) -> &[usize] {
        &self.query_labels
    }

    pub fn gallery_labels(&self) -> &[usize] {
        &self.gallery_labels
    }

    /// Same labels, embeddings replaced by `f(query)` and `f(gallery)`.
    pub fn map_embeddings(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        Self::new(
            f(&self.query),
            self.query_labels.clone(),
            f(&self.gallery),
            self.gallery_labels.clone(),
        )
    }
}

/// CMC curve over every gallery rank, Rank-1 and mAP.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub map: f64,
    /// Queries whose identity has no gallery item.
    pub excluded_queries: usize,
    pub evaluated_queries: usize,
}

impl RetrievalMetrics {
    /// `rank,cmc` rows, ranks starting at 1.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,cmc\n");
        for (r, v) in self.cmc.iter().enumerate() {
            writeln!(out, "{},{v:.17}", r + 1).unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "rank1,map,excluded_queries\n{:.17},{:.17},{}\n",
            self.rank1, self.map, self.excluded_queries
        )
    }
}

/// Gallery indices by ascending distance to `q`, ties by index.
pub fn rank_gallery(q: &[f64], gallery: &DMatrix<f64>) -> Vec<usize> {
    let dist: Vec<f64> = (0..gallery.nrows())
        .map(|g| {
            q.iter()
                .enumerate()
                .map(|(j, &v)| (v - gallery[(g, j)]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..gallery.nrows()).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .partial_cmp(&dist[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Rank of the first hit and average precision for one ranked list, or
/// `None` when nothing is relevant.
fn score_ranking(order: &[usize], gallery_labels: &[usize], label: usize) -> Option<(usize, f64)> {
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (rank, &g) in order.iter().enumerate() {
        if gallery_labels[g] == label {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
            first.get_or_insert(rank);
        }
    }
    first.map(|f| (f, precision_sum / hits as f64))
}

/// Euclidean ranking of the gallery for every query. Average precision is the
/// mean precision at each relevant item; queries without a relevant gallery
/// item are skipped and counted.
pub fn evaluate(split: &QueryGallerySplit) -> Result<RetrievalMetrics> {
    let per_query: Vec<Option<(usize, f64)>> = (0..split.query.nrows())
        .into_par_iter()
        .map(|q| {
            let row: Vec<f64> = split.query.row(q).iter().copied().collect();
            let order = rank_gallery(&row, &split.gallery);
            score_ranking(&order, &split.gallery_labels, split.query_labels[q])
        })
        .collect();

    let scored: Vec<(usize, f64)> = per_query.iter().flatten().copied().collect();
    let excluded = per_query.len() - scored.len();
    if scored.is_empty() {
        return Err(PlaError::invalid(format!(
            "none of the {excluded} queries has a matching gallery identity"
        )));
    }
    let n = scored.len() as f64;
    let mut first_hits = vec![0usize; split.gallery.nrows()];
    for &(first, _) in &scored {
        first_hits[first] += 1;
    }
    let mut cmc = Vec::with_capacity(first_hits.len());
    let mut cumulative = 0usize;
    for h in first_hits {
        cumulative += h;
        cmc.push(cumulative as f64 / n);
    }
    let map = scored.iter().map(|&(_, ap)| ap).sum::<f64>() / n;
    Ok(RetrievalMetrics {
        rank1: cmc[0],
        cmc,
        map,
        excluded_queries: excluded,
        evaluated_queries: scored.len(),
    })
}

/// A fitted principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `e × target_dim`, orthonormal columns in descending eigenvalue order.
    pub basis: DMatrix<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits on the rows of `data`. Each basis vector is signed so that its
    /// largest-magnitude entry is positive.
    pub fn fit(data: &DMatrix<f64>, target_dim: usize) -> Result<Self> {
        let (n, e) = data.shape();
        if target_dim == 0 || target_dim > n.min(e) {
            return Err(PlaError::invalid(format!(
                "target_dim {target_dim} must lie in 1..={} for {n}×{e} data",
                n.min(e)
            )));
        }
        let mean = data.row_mean().transpose();
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });

        let mut basis = DMatrix::zeros(e, target_dim);
        for (c, &src) in order.iter().take(target_dim).enumerate() {
            let mut v = eig.eigenvectors.column(src).clone_owned();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.neg_mut();
            }
            basis.set_column(c, &v);
        }
        Ok(Self {
            mean,
            basis,
            eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
        })
    }

    pub fn project(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(PlaError::invalid(format!(
                "data has {} columns, projection expects {}",
                data.ncols(),
                self.mean.len()
            )));
        }
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.basis)
    }
}

/// Fits PCA on `embeddings` and returns the projected rows with the fit.
pub fn pca_reduce(embeddings: &DMatrix<f64>, target_dim: usize) -> Result<(DMatrix<f64>, Pca)> {
    let pca = Pca::fit(embeddings, target_dim)?;
    Ok((pca.project(embeddings)?, pca))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(xs.len(), 1, xs)
    }

    #[test]
    fn hits_at_ranks_one_and_three() {
        let split = QueryGallerySplit::new(
            line(&[0.0]),
            vec![1],
            line(&[1.0, 2.0, 3.0, 4.0]),
            vec![1, 0, 1, 0],
        )
        .unwrap();
        let m = evaluate(&split).unwrap();
        assert!((m.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(m.cmc, vec![1.0; 4]);
        assert_eq!(m.rank1, 1.0);
    }

    #[test]
    fn ties_go_to_lower_gallery_index() {
        let split =
            QueryGallerySplit::new(line(&[0.0]), vec![1], line(&[1.0, -1.0]), vec![0, 1]).unwrap();
        let m = evaluate(&split).unwrap();
        assert_eq!(m.cmc, vec![0.0, 1.0]);
        assert_eq!(m.map, 0.5);
    }

    #[test]
    fn absent_identity_is_excluded() {
        let split =
            QueryGallerySplit::new(line(&[0.0, 5.0]), vec![0, 9], line(&[0.1, 3.0]), vec![0, 1])
                .unwrap();
        let m = evaluate(&split).unwrap();
        assert_eq!(m.excluded_queries, 1);
        assert_eq!(m.evaluated_queries, 1);
        assert_eq!(m.rank1, 1.0);
        assert!(m.summary_csv().ends_with(",1\n"));
        let none = QueryGallerySplit::new(line(&[0.0]), vec![9], line(&[0.1]), vec![0]).unwrap();
        assert!(evaluate(&none).is_err());
    }

    #[test]
    fn perfect_retrieval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers: Vec<f64> = (0..5).map(|i| i as f64 * 10.0).collect();
        let g: Vec<f64> = (0..15)
            .map(|i| centers[i % 5] + rng.random_range(-0.5..0.5))
            .collect();
        let q: Vec<f64> = (0..5)
            .map(|i| centers[i] + rng.random_range(-0.5..0.5))
            .collect();
        let split = QueryGallerySplit::new(
            line(&q),
            (0..5).collect(),
            line(&g),
            (0..15).map(|i| i % 5).collect(),
        )
        .unwrap();
        let m = evaluate(&split).unwrap();
        assert_eq!(m.rank1, 1.0);
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(QueryGallerySplit::new(
            DMatrix::zeros(1, 2),
            vec![0],
            DMatrix::zeros(1, 3),
            vec![0]
        )
        .is_err());
    }

    #[test]
    fn csv_outputs() {
        let split =
            QueryGallerySplit::new(line(&[0.0]), vec![1], line(&[1.0, 2.0]), vec![0, 1]).unwrap();
        let m = evaluate(&split).unwrap();
        assert_eq!(m.cmc_csv().lines().count(), 3);
        assert!(m.cmc_csv().starts_with("rank,cmc\n1,0.0"));
        assert!(m.summary_csv().starts_with("rank1,map,excluded_queries\n"));
    }

    #[test]
    fn pca_on_axis_aligned_points() {
        let data = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 0.0, 4.0, 0.0, 5.0, 0.0]);
        let (proj, pca) = pca_reduce(&data, 1).unwrap();
        let expected = [-2.0, -1.0, 1.0, 2.0];
        for (i, e) in expected.iter().enumerate() {
            assert!((proj[(i, 0)] - e).abs() < 1e-12);
        }
        assert!((pca.basis[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(pca.eigenvalues.len(), 2);
        assert!((pca.eigenvalues[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn pca_full_rank_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = DMatrix::from_fn(12, 5, |_, _| rng.random_range(-1.0..1.0));
        let (proj, pca) = pca_reduce(&data, 5).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let a = (data.row(i) - data.row(j)).norm();
                let b = (proj.row(i) - proj.row(j)).norm();
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        for c in 0..5 {
            let col = pca.basis.column(c);
            let lead = col
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn pca_exact_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coeffs = DMatrix::from_fn(10, 2, |_, _| rng.random_range(-1.0..1.0));
        let dirs = DMatrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0));
        let data = coeffs * dirs;
        let (proj, pca) = pca_reduce(&data, 2).unwrap();
        let mut recon = proj * pca.basis.transpose();
        for mut row in recon.row_iter_mut() {
            row += pca.mean.transpose();
        }
        assert!((recon - data).abs().max() < 1e-10);
    }

    #[test]
    fn pca_rejects_large_target() {
        assert!(pca_reduce(&DMatrix::zeros(3, 5), 4).is_err());
        assert!(pca_reduce(&DMatrix::zeros(3, 5), 0).is_err());
    }
}
