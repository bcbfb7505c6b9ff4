//! Constraint-aware flow matching toolkit.
//!
//! Implements flow-matching training with differentiable constraint
//! projections inside the loss, projection-based constrained samplers, and
//! desk-scale synthetic benchmarks with the associated feasibility and
//! distribution metrics.

pub mod array;
pub mod constraints;
pub mod diffcore;
pub mod error;
pub mod linalg;
pub mod projection;

pub use array::DenseArray;
pub use constraints::ConstraintSet;
pub use error::{Error, Result};
