//! Adam with an epoch-indexed learning-rate decay and a one-time switch of
//! the first-moment decay rate.

use serde::{Deserialize, Serialize};

use crate::error::{PlaError, Result};

/// Optimizer hyperparameters and schedule thresholds. Epochs are counted
/// from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub alpha0: f64,
    /// Last epoch at the base learning rate.
    pub e0: usize,
    /// Epoch at which the rate reaches `alpha0 · 0.001`.
    pub e1: usize,
    pub beta1_early: f64,
    pub beta1_late: f64,
    /// First epoch that uses `beta1_late`.
    pub beta1_switch_epoch: usize,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha0: 3e-4,
            e0: 150,
            e1: 300,
            beta1_early: 0.9,
            beta1_late: 0.5,
            beta1_switch_epoch: 150,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| b > 0.0 && b < 1.0;
        if !self.alpha0.is_finite() || self.alpha0 <= 0.0 {
            return Err(PlaError::Config(format!(
                "alpha0 must be positive and finite, got {}",
                self.alpha0
            )));
        }
        if self.e0 >= self.e1 {
            return Err(PlaError::Config(format!(
                "e0 ({}) must be smaller than e1 ({})",
                self.e0, self.e1
            )));
        }
        for (name, b) in [
            ("beta1_early", self.beta1_early),
            ("beta1_late", self.beta1_late),
            ("beta2", self.beta2),
        ] {
            if !beta_ok(b) {
                return Err(PlaError::Config(format!(
                    "{name} must lie in (0, 1), got {b}"
                )));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(PlaError::Config(
                "epsilon must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn beta1(&self, epoch: usize) -> f64 {
        if epoch < self.beta1_switch_epoch {
            self.beta1_early
        } else {
            self.beta1_late
        }
    }
}

/// `alpha0` up to `e0`, then exponential decay reaching `alpha0 · 0.001` at
/// `e1`, held there afterwards.
pub fn lr_schedule(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    if epoch <= cfg.e0 {
        cfg.alpha0
    } else {
        let t = (epoch.min(cfg.e1) - cfg.e0) as f64 / (cfg.e1 - cfg.e0) as f64;
        cfg.alpha0 * 0.001f64.powf(t)
    }
}

/// First and second moment accumulators over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// Advances the step counter. Call once per update, before applying
    /// [`AdamState::update`] to the parameter blocks.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected Adam update of `params[..]`, whose moments live at
    /// `offset..offset + params.len()`.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        offset: usize,
        params: &mut [f64],
        grads: &[f64],
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || offset + params.len() > self.len() {
            return Err(PlaError::invalid(
                "parameter/gradient/moment length mismatch",
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(PlaError::NonFiniteGradient(format!(
                "block at offset {offset}, step {}",
                self.step
            )));
        }
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = &mut self.first_moment[offset..offset + params.len()];
        let v = &mut self.second_moment[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}
