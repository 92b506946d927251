//! Desk-scale crosscoder model diffing.
//!
//! The crate builds a synthetic pair of "models" that share most concepts
//! but each observe a few exclusive ones, trains standard, dedicated-feature
//! (DFC) and designated-shared-feature (DSF) crosscoders on their paired
//! activations, and scores how well each architecture recovers and isolates
//! the exclusive concepts. Supporting tools cover cross-tokenizer activation
//! alignment, affine model stitching and crosscoder-mediated feature
//! transfer.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod alignment;
pub mod crosscoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod training;
pub mod transfer;

mod io;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Crosscoder = crosscoder::CrosscoderModel<f32>;
pub type Crosscoder64 = crosscoder::CrosscoderModel<f64>;
pub type Bank = synthdata::ConceptBank<f32>;
pub type Bank64 = synthdata::ConceptBank<f64>;
pub type PairBatch = synthdata::ActivationPairBatch<f32>;
pub type PairBatch64 = synthdata::ActivationPairBatch<f64>;
