//! The hyperparameter vector `(lambda, margin, k, p)` steered by the
//! Bayesian optimizer, and the box it is searched in.

use serde::{Deserialize, Serialize};

use crate::error::{PlaError, Result};

/// Number of coordinates in a hyperparameter vector.
pub const HYPER_DIM: usize = 4;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    fn within(&self, outer: &Interval) -> bool {
        self.lo <= self.hi && outer.contains(self.lo) && outer.contains(self.hi)
    }
}

/// Search box for [`HyperParams`]. `k` and `p` bounds are integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperBox {
    pub lambda: Interval,
    pub margin: Interval,
    pub k: Interval,
    pub p: Interval,
}

impl Default for HyperBox {
    fn default() -> Self {
        Self::FULL
    }
}

impl HyperBox {
    /// The widest admissible box: `lambda ∈ [0, 2]`, `margin ∈ [-0.1, 0.3]`,
    /// `k ∈ [1, 8]`, `p ∈ [1, 16]`.
    pub const FULL: HyperBox = HyperBox {
        lambda: Interval::new(0.0, 2.0),
        margin: Interval::new(-0.1, 0.3),
        k: Interval::new(1.0, 8.0),
        p: Interval::new(1.0, 16.0),
    };

    /// Checks that this box is non-empty, lies inside [`HyperBox::FULL`], and
    /// has integral `k`/`p` bounds.
    pub fn validate(&self) -> Result<()> {
        let full = Self::FULL;
        for (name, iv, outer) in [
            ("lambda", self.lambda, full.lambda),
            ("margin", self.margin, full.margin),
            ("k", self.k, full.k),
            ("p", self.p, full.p),
        ] {
            if !iv.within(&outer) {
                return Err(PlaError::Config(format!(
                    "bounds for {name} [{}, {}] must lie within [{}, {}]",
                    iv.lo, iv.hi, outer.lo, outer.hi
                )));
            }
        }
        for (name, iv) in [("k", self.k), ("p", self.p)] {
            if iv.lo.fract() != 0.0 || iv.hi.fract() != 0.0 {
                return Err(PlaError::Config(format!(
                    "bounds for {name} must be integers, got [{}, {}]",
                    iv.lo, iv.hi
                )));
            }
        }
        Ok(())
    }

    pub fn intervals(&self) -> [Interval; HYPER_DIM] {
        [self.lambda, self.margin, self.k, self.p]
    }

    pub fn widths(&self) -> [f64; HYPER_DIM] {
        self.intervals().map(|iv| iv.width())
    }

    pub fn center(&self) -> [f64; HYPER_DIM] {
        self.intervals().map(|iv| 0.5 * (iv.lo + iv.hi))
    }

    pub fn contains(&self, w: &HyperParams) -> bool {
        self.lambda.contains(w.lambda)
            && self.margin.contains(w.margin)
            && self.k.contains(w.k as f64)
            && self.p.contains(w.p as f64)
    }

    /// Maps a real-valued point into the box, clamping every coordinate and
    /// rounding `k`, `p` to the nearest integer.
    pub fn instantiate(&self, x: &[f64; HYPER_DIM]) -> HyperParams {
        let clamp = |v: f64, iv: Interval| v.clamp(iv.lo, iv.hi);
        HyperParams {
            lambda: clamp(x[0], self.lambda),
            margin: clamp(x[1], self.margin),
            k: clamp(x[2].round(), self.k) as usize,
            p: clamp(x[3].round(), self.p) as usize,
        }
    }
}

/// Hyperparameters of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Weight of the generalized triplet term.
    pub lambda: f64,
    pub margin: f64,
    /// Rank of the positive distance taken from the top (1 = farthest).
    pub k: usize,
    /// Rank of the negative distance taken from the bottom (1 = nearest).
    pub p: usize,
}

impl HyperParams {
    /// Builds a hyperparameter vector, checking it against [`HyperBox::FULL`].
    pub fn new(lambda: f64, margin: f64, k: usize, p: usize) -> Result<Self> {
        let w = Self {
            lambda,
            margin,
            k,
            p,
        };
        w.validate()?;
        Ok(w)
    }

    /// Plain batch-hard mining (`k = p = 1`) with the given weight and margin.
    pub fn batch_hard(lambda: f64, margin: f64) -> Result<Self> {
        Self::new(lambda, margin, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if HyperBox::FULL.contains(self) {
            Ok(())
        } else {
            Err(PlaError::invalid(format!(
                "hyperparameters out of range: {self}"
            )))
        }
    }

    /// The point as a real vector; `k` and `p` embed as reals.
    pub fn to_array(&self) -> [f64; HYPER_DIM] {
        [self.lambda, self.margin, self.k as f64, self.p as f64]
    }
}

impl std::fmt::Display for HyperParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(lambda={:.4}, margin={:.4}, k={}, p={})",
            self.lambda, self.margin, self.k, self.p
        )
    }
}
