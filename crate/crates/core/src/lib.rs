//! Learning pairwise cost function networks from solved instances.
//!
//! A neural network predicts one cost matrix per pair of variables from pair
//! features. It is trained with the Emmental pseudo-loglikelihood, which
//! computes each variable's conditional after muting a random subset of its
//! incident pair functions. The predicted network can be solved exactly,
//! thresholded or hardened into explicit constraints.

pub mod dfl;
pub mod error;
pub mod gm;
pub mod harden;
pub mod loss;
pub mod model;
pub mod neural;
pub mod solver;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use gm::{Assignment, CostFunctionNetwork, PartialAssignment, DEFAULT_TOP};
pub use loss::{LossGradients, MaskSet};
pub use solver::{SolveOptions, SolverResult, Status};
pub use tasks::{Instance, Sample, TaskKind};
