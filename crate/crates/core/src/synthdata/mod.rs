//! Synthetic two-model environment with known shared and model-exclusive
//! concepts.
//!
//! Concepts are random unit vectors in the model-A frame. Model B observes
//! the shared and B-exclusive concepts through a random affine map whose
//! output is rescaled to preserve the median concept norm. Each generated
//! row activates a sparse, correlated set of concepts with a common scale in
//! both models.

mod bank;
mod dump;
mod sampling;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bank::{build_concept_bank, build_probabilities, probabilities_from_latent, ConceptBank};
pub use dump::{
    decode_activation_dump, encode_activation_dump, read_activation_dump, write_activation_dump,
    DUMP_MAGIC, DUMP_VERSION,
};
pub use sampling::{
    sample_active_sets, sample_batch, synthesize, ActivationPairBatch, ActiveSet, BatchSource,
    PairStream,
};

/// Ground-truth category of a concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Shared,
    AExclusive,
    BExclusive,
}

impl ConceptKind {
    pub fn observable_by_a(self) -> bool {
        self != ConceptKind::BExclusive
    }

    pub fn observable_by_b(self) -> bool {
        self != ConceptKind::AExclusive
    }

    pub fn is_exclusive(self) -> bool {
        self != ConceptKind::Shared
    }
}

/// How model B's concept frame is derived from model A's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// `A_ij ~ N(0, transform_variance)`, `b_i ~ N(0, tau^2)`.
    #[default]
    Random,
    /// `A = I`, `b = 0`; model B sees the same frame as model A.
    Identity,
}

/// Parameters of the synthetic concept environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_concepts: usize,
    pub d_act: usize,
    /// Fraction of all concepts that are exclusive (split evenly between A and B).
    pub r_exclusive: f64,
    /// Expected number of active concepts per row; `n_concepts / 100` when unset.
    pub k_target: Option<f64>,
    pub correlation_rank: usize,
    pub sigma_diag: f64,
    /// Exponential frequency decay rate.
    pub decay: f64,
    /// Translation scale of the model-B affine map.
    pub tau: f64,
    /// Standard deviation of the isotropic activation noise.
    pub noise: f64,
    /// Lower clamp on activation probabilities.
    pub min_prob: f64,
    /// Variance of the entries of the model-B linear map.
    pub transform_variance: f64,
    pub transform: TransformKind,
    /// Bernoulli redraws for a row with no active concept before falling back
    /// to the most probable concept.
    pub max_resample: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ToyConfig {
    /// Full-size toy environment (2048 concepts in 256 dimensions).
    pub fn paper() -> Self {
        Self {
            n_concepts: 2048,
            d_act: 256,
            r_exclusive: 0.05,
            k_target: None,
            correlation_rank: 10,
            sigma_diag: 1.0,
            decay: 0.001,
            tau: 0.1,
            noise: 0.01,
            min_prob: 1e-4,
            transform_variance: 0.25,
            transform: TransformKind::Random,
            max_resample: 8,
        }
    }

    /// Minutes-scale environment: 256 concepts in 64 dimensions.
    pub fn desk() -> Self {
        Self {
            n_concepts: 256,
            d_act: 64,
            ..Self::paper()
        }
    }

    pub fn k_target(&self) -> f64 {
        self.k_target.unwrap_or(self.n_concepts as f64 / 100.0)
    }

    /// Number of exclusive concepts per model.
    pub fn exclusive_per_model(&self) -> usize {
        (self.n_concepts as f64 * self.r_exclusive / 2.0).round() as usize
    }

    /// Copy with every optional field resolved.
    pub fn effective(&self) -> Self {
        Self {
            k_target: Some(self.k_target()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_concepts < 2 {
            return Err(Error::config("toy.n_concepts", "must be at least 2"));
        }
        if self.d_act < 2 {
            return Err(Error::config("toy.d_act", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.r_exclusive) {
            return Err(Error::config("toy.r_exclusive", "must lie in [0, 1)"));
        }
        if 2 * self.exclusive_per_model() > self.n_concepts {
            return Err(Error::config(
                "toy.r_exclusive",
                "exclusive concepts exceed the concept count",
            ));
        }
        if self.correlation_rank < 1 {
            return Err(Error::config("toy.correlation_rank", "must be at least 1"));
        }
        if !(self.decay >= 0.0) {
            return Err(Error::config("toy.decay", "must be non-negative"));
        }
        if !(self.k_target() > 0.0) || !self.k_target().is_finite() {
            return Err(Error::config("toy.k_target", "must be positive and finite"));
        }
        if !(self.sigma_diag >= 0.0) {
            return Err(Error::config("toy.sigma_diag", "must be non-negative"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::config("toy.tau", "must be non-negative"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("toy.noise", "must be non-negative"));
        }
        if !(self.min_prob > 0.0 && self.min_prob <= 1.0) {
            return Err(Error::config("toy.min_prob", "must lie in (0, 1]"));
        }
        if !(self.transform_variance > 0.0) {
            return Err(Error::config("toy.transform_variance", "must be positive"));
        }
        Ok(())
    }
}
