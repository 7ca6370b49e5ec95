//! Synthetic identity clusters with graded difficulty, query/gallery/train
//! partitioning, and a plain-text dataset format.
//!
//! Difficulty comes from three dials:
//! * hard negatives: some identity centers sit `2·intra_spread` from a partner center;
//! * outliers: samples drawn at four times the usual spread (medium-hard positives);
//! * over-hard samples: drawn from another identity's cluster but keep their own label.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PlaError, Result};

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub dim: usize,
    /// Centers are uniform in `[-center_scale, center_scale]^dim`.
    pub center_scale: f64,
    /// Within-identity standard deviation.
    pub intra_spread: f64,
    pub hard_negative_fraction: f64,
    pub outlier_fraction: f64,
    pub overhard_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 64,
            samples_per_identity: 16,
            dim: 32,
            center_scale: 1.0,
            intra_spread: 0.5,
            hard_negative_fraction: 0.1,
            outlier_fraction: 0.1,
            overhard_fraction: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(PlaError::Config(format!(
                "n_identities must be at least 2, got {}",
                self.n_identities
            )));
        }
        if self.samples_per_identity == 0 || self.dim == 0 {
            return Err(PlaError::Config(
                "samples_per_identity and dim must be positive".into(),
            ));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return Err(PlaError::Config(
                "center_scale must be finite and non-negative".into(),
            ));
        }
        if !(self.intra_spread >= 0.0 && self.intra_spread.is_finite()) {
            return Err(PlaError::Config(
                "intra_spread must be finite and non-negative".into(),
            ));
        }
        for (name, f) in [
            ("hard_negative_fraction", self.hard_negative_fraction),
            ("outlier_fraction", self.outlier_fraction),
            ("overhard_fraction", self.overhard_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(PlaError::Config(format!(
                    "{name} must lie in [0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Role of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Query,
    Gallery,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Query => "query",
            Self::Gallery => "gallery",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "query" => Ok(Self::Query),
            "gallery" => Ok(Self::Gallery),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

/// Features, identity labels and split tags, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub splits: Vec<SplitTag>,
}

impl LabeledDataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, splits: Vec<SplitTag>) -> Result<Self> {
        if features.nrows() != labels.len() || labels.len() != splits.len() {
            return Err(PlaError::invalid(format!(
                "dataset has {} rows, {} labels, {} split tags",
                features.nrows(),
                labels.len(),
                splits.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(PlaError::invalid("dataset contains non-finite features"));
        }
        Ok(Self {
            features,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn identities(&self) -> Vec<usize> {
        let mut ids = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == tag).collect()
    }

    /// Features and labels of the rows tagged `tag`, in file order.
    pub fn subset(&self, tag: SplitTag) -> (DMatrix<f64>, Vec<usize>) {
        let idx = self.indices(tag);
        (
            self.features.select_rows(idx.iter()),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| PlaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PlaError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Header `id,split,f0,...`, then one row per sample with reals written
    /// to 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::from("id,split");
        for j in 0..self.dim() {
            write!(out, ",f{j}").unwrap();
        }
        out.push('\n');
        for i in 0..self.len() {
            write!(out, "{},{}", self.labels[i], self.splits[i].as_str()).unwrap();
            for j in 0..self.dim() {
                write!(out, ",{:.16e}", self.features[(i, j)]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| PlaError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file, expected header".into()))?;
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "split" {
            return Err(parse_err(
                1,
                "header must start with id,split and name at least one feature".into(),
            ));
        }
        for (j, c) in cols[2..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(parse_err(1, format!("expected column f{j}, found {c:?}")));
            }
        }
        let dim = cols.len() - 2;
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(parse_err(
                    lineno,
                    format!("expected {} columns, found {}", dim + 2, fields.len()),
                ));
            }
            labels.push(
                fields[0]
                    .parse::<usize>()
                    .map_err(|e| parse_err(lineno, format!("bad id {:?}: {e}", fields[0])))?,
            );
            splits.push(
                fields[1]
                    .parse::<SplitTag>()
                    .map_err(|m| parse_err(lineno, m))?,
            );
            for f in &fields[2..] {
                let v: f64 = f
                    .parse()
                    .map_err(|e| parse_err(lineno, format!("bad value {f:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, format!("non-finite value {f:?}")));
                }
                values.push(v);
            }
        }
        let features = DMatrix::from_row_slice(labels.len(), dim, &values);
        Self::new(features, labels, splits)
    }
}

fn gaussian_around<R: Rng + ?Sized>(center: &[f64], spread: f64, rng: &mut R) -> Vec<f64> {
    center
        .iter()
        .map(|&c| c + spread * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws the dataset described by `spec`. All samples are tagged
/// [`SplitTag::Train`]; use [`split`] to carve out query and gallery sets.
pub fn generate(spec: &SynthSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_identities;
    let hard = ((spec.hard_negative_fraction * n as f64).round() as usize).min(n - 1);
    let base = n - hard;

    let mut centers: Vec<Vec<f64>> = (0..base)
        .map(|_| {
            (0..spec.dim)
                .map(|_| {
                    if spec.center_scale > 0.0 {
                        rng.random_range(-spec.center_scale..=spec.center_scale)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    for _ in 0..hard {
        let partner = centers[rng.random_range(0..base)].clone();
        let dir: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let offset = 2.0 * spec.intra_spread / norm;
        centers.push(
            partner
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + offset * d)
                .collect(),
        );
    }

    let total = n * spec.samples_per_identity;
    let mut values = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (id, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_identity {
            let row = if rng.random_bool(spec.overhard_fraction) {
                let mut other = rng.random_range(0..n - 1);
                if other >= id {
                    other += 1;
                }
                gaussian_around(&centers[other], spec.intra_spread, &mut rng)
            } else if rng.random_bool(spec.outlier_fraction) {
                gaussian_around(center, 4.0 * spec.intra_spread, &mut rng)
            } else {
                gaussian_around(center, spec.intra_spread, &mut rng)
            };
            values.extend(row);
            labels.push(id);
        }
    }
    LabeledDataset::new(
        DMatrix::from_row_slice(total, spec.dim, &values),
        labels,
        vec![SplitTag::Train; total],
    )
}

/// How identities are divided between training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SplitMode {
    /// `test_identities` identities, chosen at random, form the query and
    /// gallery sets; every other identity is training data.
    Open { test_identities: usize },
    /// Every identity contributes `train_per_identity` training samples; the
    /// rest go to query and gallery.
    Closed { train_per_identity: usize },
}

impl Default for SplitMode {
    fn default() -> Self {
        Self::Open {
            test_identities: 16,
        }
    }
}

/// Retags `dataset`: per evaluated identity, `query_per_identity` samples
/// become queries and the remainder gallery items.
pub fn split<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    query_per_identity: usize,
    mode: SplitMode,
    rng: &mut R,
) -> Result<LabeledDataset> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if query_per_identity == 0 {
        return Err(PlaError::invalid("query_per_identity must be at least 1"));
    }
    let mut ids: Vec<usize> = groups.keys().copied().collect();
    let (test_ids, train_per_identity) = match mode {
        SplitMode::Open { test_identities } => {
            if test_identities == 0 || test_identities > ids.len() {
                return Err(PlaError::invalid(format!(
                    "cannot hold out {test_identities} of {} identities",
                    ids.len()
                )));
            }
            ids.shuffle(rng);
            let mut test = ids[..test_identities].to_vec();
            test.sort_unstable();
            (test, 0)
        }
        SplitMode::Closed { train_per_identity } => (ids.clone(), train_per_identity),
    };

    let mut splits = vec![SplitTag::Train; dataset.len()];
    for id in test_ids {
        let mut members = groups[&id].clone();
        if members.len() <= query_per_identity + train_per_identity {
            return Err(PlaError::invalid(format!(
                "identity {id} has {} samples; needs more than {} query + {} train",
                members.len(),
                query_per_identity,
                train_per_identity
            )));
        }
        members.shuffle(rng);
        for (rank, &i) in members.iter().enumerate() {
            splits[i] = if rank < train_per_identity {
                SplitTag::Train
            } else if rank < train_per_identity + query_per_identity {
                SplitTag::Query
            } else {
                SplitTag::Gallery
            };
        }
    }
    LabeledDataset::new(dataset.features.clone(), dataset.labels.clone(), splits)
}
