//! Dense-array reverse-mode differentiation: the tape graph, parameter
//! store with Adam, and the finite-difference gradient check harness.

pub mod gradcheck;
pub mod graph;
pub mod params;

pub use gradcheck::grad_check;
pub use graph::{CustomOp, Gradients, Graph, NodeId};
pub use params::ParamStore;
