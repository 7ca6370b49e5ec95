//! Gaussian-process surrogate over hyperparameter space, Expected Improvement
//! acquisition, and the loss drop-rate objective the surrogate models.
//!
//! The objective is minimized. Improvement of a candidate is measured below
//! the best (lowest) observed value, so `Z = (best - mean) / sigma`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{PlaError, Result};
use crate::params::{HyperBox, HyperParams, HYPER_DIM};

/// Default diagonal jitter added to the Gram matrix.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Lower bound on every bandwidth entry.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;
/// Default expected relative drop of the loss between the two halves of an
/// exploration.
pub const DEFAULT_EXPECTED_DROP: f64 = 0.15;

/// Covariance form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    /// Normalized Gaussian on the difference: a valid stationary covariance.
    #[default]
    SquaredExponential,
    /// `exp(-½ x1ᵀ B⁻¹ x2)` with the same normalization. Gram matrices built
    /// from it need not be positive semi-definite.
    Literal,
}

fn check_bandwidth(bandwidth: &[f64]) -> Result<()> {
    if bandwidth.is_empty() || bandwidth.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
        return Err(PlaError::Config(format!(
            "bandwidth must be positive definite, got diagonal {bandwidth:?}"
        )));
    }
    Ok(())
}

/// `(2π)^{-d/2} |B|^{-1/2}` for a diagonal `B`.
fn normalization(bandwidth: &[f64]) -> f64 {
    let d = bandwidth.len() as f64;
    let det: f64 = bandwidth.iter().product();
    (2.0 * PI).powf(-0.5 * d) / det.sqrt()
}

/// Gaussian kernel with diagonal bandwidth matrix `B`.
pub fn kernel(x1: &[f64], x2: &[f64], bandwidth: &[f64], form: KernelForm) -> Result<f64> {
    check_bandwidth(bandwidth)?;
    if x1.len() != bandwidth.len() || x2.len() != bandwidth.len() {
        return Err(PlaError::invalid(format!(
            "kernel inputs of length {} and {} for a {}-dimensional bandwidth",
            x1.len(),
            x2.len(),
            bandwidth.len()
        )));
    }
    Ok(kernel_unchecked(x1, x2, bandwidth, form))
}

fn kernel_unchecked(x1: &[f64], x2: &[f64], bandwidth: &[f64], form: KernelForm) -> f64 {
    let quad: f64 = match form {
        KernelForm::SquaredExponential => x1
            .iter()
            .zip(x2)
            .zip(bandwidth)
            .map(|((a, b), h)| (a - b) * (a - b) / h)
            .sum(),
        KernelForm::Literal => x1
            .iter()
            .zip(x2)
            .zip(bandwidth)
            .map(|((a, b), h)| a * b / h)
            .sum(),
    };
    normalization(bandwidth) * (-0.5 * quad).exp()
}

/// Silverman scale factor `1.06 · n^{-1/5}`.
pub fn silverman_factor(n: usize) -> f64 {
    1.06 * (n as f64).powf(-0.2)
}

/// Diagonal bandwidth from sample spread: entry `j` is
/// `(1.06 · n^{-1/5} · std_j)²`, floored at [`BANDWIDTH_FLOOR`]. With fewer
/// than two points the scale falls back to `fallback_widths[j] / 4`.
pub fn estimate_bandwidth(points: &[Vec<f64>], fallback_widths: &[f64]) -> Vec<f64> {
    let dim = fallback_widths.len();
    if points.len() < 2 {
        return fallback_widths
            .iter()
            .map(|w| (w / 4.0).powi(2).max(BANDWIDTH_FLOOR))
            .collect();
    }
    let n = points.len();
    let factor = silverman_factor(n);
    (0..dim)
        .map(|j| {
            let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
            let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (factor * var.sqrt()).powi(2).max(BANDWIDTH_FLOOR)
        })
        .collect()
}

fn hyper_points(points: &[HyperParams]) -> Vec<Vec<f64>> {
    points.iter().map(|w| w.to_array().to_vec()).collect()
}

/// Posterior belief at one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    /// Clamped at zero.
    pub variance: f64,
    /// Before clamping; may be slightly negative from round-off.
    pub raw_variance: f64,
}

impl Posterior {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Observed hyperparameter sets, their objective values, and the kernel
/// configuration. The mean function is the constant `mean_level`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpState {
    points: Vec<HyperParams>,
    values: Vec<f64>,
    bandwidth: Vec<f64>,
    mean_level: f64,
    jitter: f64,
    form: KernelForm,
}

impl GpState {
    /// A state with an explicit bandwidth; the mean level is the mean of
    /// `values`.
    pub fn new(points: Vec<HyperParams>, values: Vec<f64>, bandwidth: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(PlaError::invalid(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        if points.is_empty() {
            return Err(PlaError::invalid(
                "a GP state needs at least one observation",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PlaError::invalid("non-finite objective value"));
        }
        check_bandwidth(&bandwidth)?;
        if bandwidth.len() != HYPER_DIM {
            return Err(PlaError::Config(format!(
                "bandwidth must have {HYPER_DIM} entries, got {}",
                bandwidth.len()
            )));
        }
        let mean_level = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self {
            points,
            values,
            bandwidth,
            mean_level,
            jitter: DEFAULT_JITTER,
            form: KernelForm::default(),
        })
    }

    /// A state whose bandwidth is estimated from the observed points.
    pub fn from_observations(
        points: Vec<HyperParams>,
        values: Vec<f64>,
        bounds: &HyperBox,
    ) -> Result<Self> {
        let bandwidth = estimate_bandwidth(&hyper_points(&points), &bounds.widths());
        Self::new(points, values, bandwidth)
    }

    pub fn with_form(mut self, form: KernelForm) -> Self {
        self.form = form;
        self
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn with_mean_level(mut self, mean_level: f64) -> Self {
        self.mean_level = mean_level;
        self
    }

    pub fn points(&self) -> &[HyperParams] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn mean_level(&self) -> f64 {
        self.mean_level
    }

    pub fn form(&self) -> KernelForm {
        self.form
    }

    /// Lowest observed objective value.
    pub fn best_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Appends an observation and refreshes the mean level. The bandwidth is
    /// left unchanged.
    pub fn push(&mut self, w: HyperParams, value: f64) {
        self.points.push(w);
        self.values.push(value);
        self.mean_level = self.values.iter().sum::<f64>() / self.values.len() as f64;
    }

    pub fn reestimate_bandwidth(&mut self, bounds: &HyperBox) {
        self.bandwidth = estimate_bandwidth(&hyper_points(&self.points), &bounds.widths());
    }

    pub fn kernel(&self, a: &HyperParams, b: &HyperParams) -> f64 {
        kernel_unchecked(&a.to_array(), &b.to_array(), &self.bandwidth, self.form)
    }

    /// Factorizes the Gram matrix once for repeated posterior queries.
    pub fn fit(&self) -> Result<FittedGp<'_>> {
        let n = self.points.len();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            let k = self.kernel(&self.points[i], &self.points[j]);
            if i == j {
                k + self.jitter
            } else {
                k
            }
        });
        let residual = DVector::from_iterator(n, self.values.iter().map(|v| v - self.mean_level));
        let solver = match gram.clone().cholesky() {
            Some(chol) => GramSolver::Cholesky(chol),
            None => GramSolver::Lu(gram.lu()),
        };
        let alpha = solver.solve(&residual).ok_or_else(|| {
            PlaError::Numerical(format!(
                "Gram matrix of {n} observations is singular after jitter"
            ))
        })?;
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(PlaError::Numerical(
                "Gram solve produced non-finite weights".into(),
            ));
        }
        Ok(FittedGp {
            state: self,
            solver,
            alpha,
        })
    }

    /// Posterior mean and variance at `candidate`.
    pub fn posterior(&self, candidate: &HyperParams) -> Result<Posterior> {
        self.fit()?.posterior(candidate)
    }

    /// Closed-form Expected Improvement below `best_value`.
    pub fn expected_improvement(&self, candidate: &HyperParams, best_value: f64) -> Result<f64> {
        Ok(expected_improvement(
            &self.posterior(candidate)?,
            best_value,
        ))
    }
}

enum GramSolver {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl GramSolver {
    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            GramSolver::Cholesky(c) => Some(c.solve(rhs)),
            GramSolver::Lu(lu) => lu.solve(rhs),
        }
    }
}

/// A [`GpState`] with its Gram matrix factorized.
pub struct FittedGp<'a> {
    state: &'a GpState,
    solver: GramSolver,
    alpha: DVector<f64>,
}

impl FittedGp<'_> {
    pub fn posterior(&self, candidate: &HyperParams) -> Result<Posterior> {
        let s = self.state;
        let cross = DVector::from_iterator(
            s.points.len(),
            s.points.iter().map(|w| s.kernel(candidate, w)),
        );
        let mean = s.mean_level + cross.dot(&self.alpha);
        let prior = s.kernel(candidate, candidate);
        let reduction = match &self.solver {
            GramSolver::Cholesky(c) => {
                let v = c
                    .l_dirty()
                    .solve_lower_triangular(&cross)
                    .ok_or_else(|| PlaError::Numerical("triangular solve failed".into()))?;
                v.norm_squared()
            }
            GramSolver::Lu(lu) => {
                let v = lu
                    .solve(&cross)
                    .ok_or_else(|| PlaError::Numerical("Gram matrix is singular".into()))?;
                cross.dot(&v)
            }
        };
        let raw_variance = prior - reduction;
        if !mean.is_finite() || !raw_variance.is_finite() {
            return Err(PlaError::Numerical("non-finite posterior".into()));
        }
        Ok(Posterior {
            mean,
            variance: raw_variance.max(0.0),
            raw_variance,
        })
    }
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `σ (Z Φ(Z) + φ(Z))` with `Z = (best - μ) / σ`; zero when `σ = 0`.
pub fn expected_improvement(posterior: &Posterior, best_value: f64) -> f64 {
    let sigma = posterior.std_dev();
    if sigma <= 0.0 {
        return 0.0;
    }
    let z = (best_value - posterior.mean) / sigma;
    (sigma * (z * normal_cdf(z) + normal_pdf(z))).max(0.0)
}

/// A candidate picked by [`propose`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub params: HyperParams,
    pub expected_improvement: f64,
}

/// Uniform draw from the box; `k` and `p` are drawn as integers.
pub fn sample_uniform<R: Rng + ?Sized>(bounds: &HyperBox, rng: &mut R) -> HyperParams {
    let real = |iv: crate::params::Interval, rng: &mut R| {
        if iv.width() > 0.0 {
            rng.random_range(iv.lo..=iv.hi)
        } else {
            iv.lo
        }
    };
    let int = |iv: crate::params::Interval, rng: &mut R| {
        rng.random_range(iv.lo as usize..=iv.hi as usize)
    };
    HyperParams {
        lambda: real(bounds.lambda, rng),
        margin: real(bounds.margin, rng),
        k: int(bounds.k, rng),
        p: int(bounds.p, rng),
    }
}

/// Samples `pool_size` candidates uniformly in `bounds` and returns the one
/// with the largest Expected Improvement below the best observation. Ties go
/// to the first candidate drawn.
pub fn propose<R: Rng + ?Sized>(
    state: &GpState,
    bounds: &HyperBox,
    pool_size: usize,
    rng: &mut R,
) -> Result<Proposal> {
    let pool: Vec<HyperParams> = (0..pool_size.max(1))
        .map(|_| sample_uniform(bounds, rng))
        .collect();
    select_from_pool(state, &pool)
}

/// EI-argmax over an explicit pool (first occurrence wins ties).
pub fn select_from_pool(state: &GpState, pool: &[HyperParams]) -> Result<Proposal> {
    if pool.is_empty() {
        return Err(PlaError::invalid("empty candidate pool"));
    }
    let fitted = state.fit()?;
    let best = state.best_value();
    let mut chosen = Proposal {
        params: pool[0],
        expected_improvement: f64::NEG_INFINITY,
    };
    for cand in pool {
        let ei = expected_improvement(&fitted.posterior(cand)?, best);
        if ei > chosen.expected_improvement {
            chosen = Proposal {
                params: *cand,
                expected_improvement: ei,
            };
        }
    }
    Ok(chosen)
}

/// `n` stratified draws over the box: each coordinate's range is cut into `n`
/// strata and every stratum is used exactly once, in a random pairing across
/// coordinates.
pub fn initial_design<R: Rng + ?Sized>(
    n: usize,
    bounds: &HyperBox,
    rng: &mut R,
) -> Vec<HyperParams> {
    let intervals = bounds.intervals();
    let columns: Vec<Vec<f64>> = intervals
        .iter()
        .enumerate()
        .map(|(j, iv)| {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(rng);
            strata
                .into_iter()
                .map(|s| {
                    let u = (s as f64 + rng.random::<f64>()) / n as f64;
                    if j < 2 {
                        iv.lo + u * iv.width()
                    } else {
                        // Integer coordinate: strata over {lo, ..., hi}.
                        (iv.lo + (u * (iv.width() + 1.0)).floor()).min(iv.hi)
                    }
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| bounds.instantiate(&[columns[0][i], columns[1][i], columns[2][i], columns[3][i]]))
        .collect()
}

/// `|((first - second) / first) - expected_drop|`: distance of the observed
/// relative loss drop from the healthy drop rate.
pub fn drop_rate_objective(
    first_half_mean: f64,
    second_half_mean: f64,
    expected_drop: f64,
) -> Result<f64> {
    if !first_half_mean.is_finite() || first_half_mean <= 0.0 {
        return Err(PlaError::InvalidMeasurement(format!(
            "first-half mean loss must be positive and finite, got {first_half_mean}"
        )));
    }
    if !second_half_mean.is_finite() {
        return Err(PlaError::InvalidMeasurement(format!(
            "second-half mean loss is not finite: {second_half_mean}"
        )));
    }
    Ok(((first_half_mean - second_half_mean) / first_half_mean - expected_drop).abs())
}

/// Outcome of one exploration of a candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationRecord {
    pub hyperparams: HyperParams,
    pub mean_loss_first_half: f64,
    pub mean_loss_second_half: f64,
    pub objective_value: f64,
}

impl ExplorationRecord {
    pub fn new(
        hyperparams: HyperParams,
        first_half: f64,
        second_half: f64,
        expected_drop: f64,
    ) -> Result<Self> {
        Ok(Self {
            hyperparams,
            mean_loss_first_half: first_half,
            mean_loss_second_half: second_half,
            objective_value: drop_rate_objective(first_half, second_half, expected_drop)?,
        })
    }
}
