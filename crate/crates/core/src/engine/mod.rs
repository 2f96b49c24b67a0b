//! Dense arrays, reverse-mode differentiation and optimisation.

pub mod adam;
pub mod array;
pub mod gradcheck;
pub mod hyper;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::Array2;
pub use gradcheck::{check_tape_fn, gradient_check, GradCheck};
pub use hyper::{EdgeState, HyperedgeIndex, SenderWeighting};
pub use params::ParamStore;
pub use tape::{Gradients, NormStats, Tape, Var};
