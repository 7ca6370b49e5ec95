//! Self-test of the Gaussian-process search against a known function: a
//! quadratic bowl over the hyperparameter box, centered at the box center in
//! width-normalized coordinates.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bayes::{initial_design, propose, GpState, KernelForm};
use crate::error::Result;
use crate::params::{HyperBox, HyperParams, HYPER_DIM};

/// `Σ_j ((w_j − c_j) / width_j)²` with `c` the box center. Zero-width
/// coordinates contribute nothing.
pub fn quadratic_objective(w: &HyperParams, bounds: &HyperBox) -> f64 {
    let x = w.to_array();
    let c = bounds.center();
    let widths = bounds.widths();
    (0..HYPER_DIM)
        .filter(|&j| widths[j] > 0.0)
        .map(|j| ((x[j] - c[j]) / widths[j]).powi(2))
        .sum()
}

/// Smallest value of [`quadratic_objective`] over points the search can
/// produce: real coordinates reach the center, integer coordinates the
/// nearest integer to it.
pub fn quadratic_minimum(bounds: &HyperBox) -> f64 {
    let c = bounds.center();
    let widths = bounds.widths();
    (2..HYPER_DIM)
        .filter(|&j| widths[j] > 0.0)
        .map(|j| ((c[j] - c[j].round()) / widths[j]).powi(2))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneSettings {
    pub initial_design: usize,
    pub rounds: usize,
    pub pool_size: usize,
    pub kernel: KernelForm,
    pub seed: u64,
}

impl Default for TuneSettings {
    fn default() -> Self {
        Self {
            initial_design: 8,
            rounds: 30,
            pool_size: 256,
            kernel: KernelForm::default(),
            seed: 0,
        }
    }
}

/// One evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    /// 0 for the initial design, then the proposal round starting at 1.
    pub round: usize,
    pub w: HyperParams,
    pub value: f64,
    pub best_so_far: f64,
}

/// Initial design followed by `rounds` Expected-Improvement proposals, with
/// the bandwidth re-estimated before every proposal.
pub fn tune_demo(
    bounds: &HyperBox,
    settings: &TuneSettings,
    objective: impl Fn(&HyperParams) -> f64,
) -> Result<Vec<TraceEntry>> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut trace: Vec<TraceEntry> = Vec::new();
    let record = |trace: &mut Vec<TraceEntry>, round, w: HyperParams| {
        let value = objective(&w);
        let best_so_far = trace
            .last()
            .map_or(value, |t: &TraceEntry| t.best_so_far.min(value));
        trace.push(TraceEntry {
            round,
            w,
            value,
            best_so_far,
        });
    };
    for w in initial_design(settings.initial_design.max(1), bounds, &mut rng) {
        record(&mut trace, 0, w);
    }
    for round in 1..=settings.rounds {
        let points = trace.iter().map(|t| t.w).collect();
        let values = trace.iter().map(|t| t.value).collect();
        let gp = GpState::from_observations(points, values, bounds)?.with_form(settings.kernel);
        let proposal = propose(&gp, bounds, settings.pool_size, &mut rng)?;
        record(&mut trace, round, proposal.params);
    }
    Ok(trace)
}

/// `round,lambda,margin,k,p,value,best` rows.
pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("round,lambda,margin,k,p,value,best\n");
    for t in trace {
        writeln!(
            out,
            "{},{:.17},{:.17},{},{},{:.17},{:.17}",
            t.round, t.w.lambda, t.w.margin, t.w.k, t.w.p, t.value, t.best_so_far
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_values() {
        let b = HyperBox::default();
        let center = HyperParams::new(1.0, 0.1, 4, 8).unwrap();
        let expected = (0.5f64 / 7.0).powi(2) + (0.5f64 / 15.0).powi(2);
        assert!((quadratic_objective(&center, &b) - expected).abs() < 1e-15);
        assert!((quadratic_minimum(&b) - expected).abs() < 1e-15);
        let corner = HyperParams::new(0.0, -0.1, 1, 1).unwrap();
        assert!((quadratic_objective(&corner, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trace_length_and_monotone_best() {
        let b = HyperBox::default();
        let s = TuneSettings {
            initial_design: 3,
            rounds: 1,
            pool_size: 1,
            ..TuneSettings::default()
        };
        let t = tune_demo(&b, &s, |w| quadratic_objective(w, &b)).unwrap();
        assert_eq!(t.len(), 4);
        let s = TuneSettings {
            rounds: 10,
            ..TuneSettings::default()
        };
        let t = tune_demo(&b, &s, |w| quadratic_objective(w, &b)).unwrap();
        assert_eq!(t.len(), 18);
        assert!(t.windows(2).all(|p| p[1].best_so_far <= p[0].best_so_far));
        assert_eq!(trace_csv(&t).lines().count(), 19);
    }

    #[test]
    fn deterministic() {
        let b = HyperBox::default();
        let s = TuneSettings {
            rounds: 5,
            seed: 3,
            ..TuneSettings::default()
        };
        let f = |w: &HyperParams| quadratic_objective(w, &b);
        assert_eq!(tune_demo(&b, &s, f).unwrap(), tune_demo(&b, &s, f).unwrap());
    }
}
