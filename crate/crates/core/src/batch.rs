//! Identity-balanced embedding batches and their pairwise distances.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PlaError, Result};

/// Floor applied to distances and norms that appear in a denominator.
pub const NORM_EPS: f64 = 1e-12;

/// A `P × K` batch of embeddings: `P` identities with `K` rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: DMatrix<f64>,
    labels: Vec<usize>,
    identities: usize,
    per_identity: usize,
}

impl EmbeddingBatch {
    /// Validates that every entry is finite and every label appears the same
    /// number of times.
    pub fn new(embeddings: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(PlaError::invalid(format!(
                "{} embedding rows but {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(PlaError::invalid("empty batch"));
        }
        if let Some(pos) = embeddings.iter().position(|v| !v.is_finite()) {
            let row = pos % embeddings.nrows();
            return Err(PlaError::invalid(format!(
                "non-finite embedding entry in row {row}"
            )));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_default() += 1;
        }
        let per_identity = *counts.values().next().unwrap();
        if let Some((label, n)) = counts.iter().find(|(_, &n)| n != per_identity) {
            return Err(PlaError::invalid(format!(
                "unbalanced batch: label {label} appears {n} times, expected {per_identity}"
            )));
        }
        Ok(Self {
            identities: counts.len(),
            per_identity,
            embeddings,
            labels,
        })
    }

    /// Convenience constructor from row slices.
    pub fn from_rows(rows: &[&[f64]], labels: &[usize]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(PlaError::invalid("rows of unequal length"));
        }
        let m = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::new(m, labels.to_vec())
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Number of distinct identities, `P`.
    pub fn identities(&self) -> usize {
        self.identities
    }

    /// Rows per identity, `K`.
    pub fn per_identity(&self) -> usize {
        self.per_identity
    }
}

/// How two embeddings are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

/// Distance options shared by every loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default)]
    pub distance: DistanceKind,
    /// L2-normalize rows before measuring distances.
    #[serde(default)]
    pub normalize: bool,
}

/// Symmetric `N × N` matrix of non-negative distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Plain Euclidean distances between all rows of the batch.
pub fn pairwise_distances(batch: &EmbeddingBatch) -> DistanceMatrix {
    pairwise_distances_with(batch.embeddings(), &MetricConfig::default())
}

/// Pairwise distances between the rows of `embeddings` under `cfg`.
///
/// Callers are expected to pass finite values; [`EmbeddingBatch`] enforces
/// that at construction.
pub fn pairwise_distances_with(embeddings: &DMatrix<f64>, cfg: &MetricConfig) -> DistanceMatrix {
    let rows = prepared_rows(embeddings, cfg.normalize);
    let n = rows.len();
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = match cfg.distance {
                DistanceKind::Euclidean => sq.sqrt(),
                DistanceKind::SquaredEuclidean => sq,
            };
            values[(i, j)] = d;
            values[(j, i)] = d;
        }
    }
    DistanceMatrix { values }
}

/// Rows of `embeddings` as contiguous vectors, optionally unit-normalized.
pub(crate) fn prepared_rows(embeddings: &DMatrix<f64>, normalize: bool) -> Vec<Vec<f64>> {
    (0..embeddings.nrows())
        .map(|i| {
            let mut row: Vec<f64> = embeddings.row(i).iter().copied().collect();
            if normalize {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            row
        })
        .collect()
}
