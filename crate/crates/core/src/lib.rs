//! Relevance-based identification of language-specific neurons in tiny
//! decoder-only transformers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for callers that do not care.

pub mod attribution;
pub mod corpus;
mod error;
pub mod evaluation;
pub mod model;
mod scalar;
pub mod seed;
pub mod specialization;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Weights = model::ModelWeights<f64>;
pub type Weights32 = model::ModelWeights<f32>;
pub type Trace = model::ForwardTrace<f64>;
pub type Trace32 = model::ForwardTrace<f32>;
