//! Crosscoder optimization: activation normalization, outlier masking,
//! reconstruction + AuxK loss with analytic gradients, Adam with linear
//! warmup, linear TopK annealing and dead-feature tracking.

mod adam;
mod loss;
mod normalize;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::Adam;
pub use loss::{loss_and_grads, loss_with_selection, AuxTrace, Gradients, LossOutput, LossParts};
pub use normalize::{compute_normalization, mask_outliers, select_rows};
pub use trainer::{dead_features, train, train_step, MetricsRecord, TrainOutcome, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    /// Rows per batch.
    pub batch: usize,
    pub k_final: usize,
    pub k_initial: usize,
    pub anneal_steps: usize,
    pub alpha_aux: f64,
    pub k_aux: usize,
    /// Rows without firing after which a feature counts as dead;
    /// `50 * batch` when unset.
    pub dead_window_tokens: Option<u64>,
    /// Rows whose norm exceeds this multiple of the batch median (in either
    /// model) are excluded from the loss.
    pub outlier_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Batches used once, up front, to estimate the normalization scales.
    pub calibration_batches: usize,
    pub init_decoder_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 100_000,
            warmup_steps: 1_000,
            batch: 2048,
            k_final: 200,
            k_initial: 1000,
            anneal_steps: 5_000,
            alpha_aux: 0.03,
            k_aux: 512,
            dead_window_tokens: None,
            outlier_factor: 2.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            calibration_batches: 10,
            init_decoder_norm: 0.4,
        }
    }
}

impl TrainConfig {
    pub fn dead_window(&self) -> u64 {
        self.dead_window_tokens.unwrap_or(50 * self.batch as u64)
    }

    pub fn effective(&self) -> Self {
        Self {
            dead_window_tokens: Some(self.dead_window()),
            ..self.clone()
        }
    }

    /// Learning rate for the update at 0-based `step`: linear ramp
    /// `lr * step / warmup` during warmup, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    /// TopK budget at `step`, linearly annealed from `k_initial` to `k_final`.
    pub fn k_at(&self, step: usize) -> usize {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.k_final;
        }
        let t = step as f64 / self.anneal_steps as f64;
        let k = self.k_initial as f64 + (self.k_final as f64 - self.k_initial as f64) * t;
        k.round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(format!("train.{f}"), r));
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.steps == 0 {
            return bad("steps", "must be positive");
        }
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if self.k_final < 1 {
            return bad("k_final", "must be at least 1");
        }
        if self.k_initial < self.k_final {
            return bad("k_initial", "must be at least k_final");
        }
        if self.anneal_steps > self.steps {
            return bad("anneal_steps", "must not exceed steps");
        }
        if !(self.alpha_aux >= 0.0) {
            return bad("alpha_aux", "must be non-negative");
        }
        if !(self.outlier_factor > 1.0) {
            return bad("outlier_factor", "must exceed 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.calibration_batches == 0 {
            return bad("calibration_batches", "must be positive");
        }
        if !(self.init_decoder_norm > 0.0) {
            return bad("init_decoder_norm", "must be positive");
        }
        Ok(())
    }
}
