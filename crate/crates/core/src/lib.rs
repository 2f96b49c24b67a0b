//! Multi-view temporal hypergraph learning for transaction fraud detection.
//!
//! The pipeline runs: [`ingest`] a transaction log, build one sliding-window
//! [`hypergraph`] per categorical view, derive cross-view [`discrepancy`]
//! features, train the novelty-weighted multi-view [`model`] with
//! [`training`], and score it with [`eval`]. [`synth`] generates seeded
//! datasets with controllable long-tail skew and camouflage.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the gradient checks require.

pub mod discrepancy;
pub mod engine;
pub mod error;
pub mod eval;
pub mod hypergraph;
pub mod ingest;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Array = engine::Array2<f64>;
pub type Tape64 = engine::Tape<f64>;
pub type Params = engine::ParamStore<f64>;
pub type Enhanced = discrepancy::EnhancedFeatureMatrix<f64>;
pub type RiskModel = discrepancy::RiskModel<f64>;
pub type Model = model::MultiViewModel<f64>;
pub type Trained = training::TrainOutcome<f64>;
