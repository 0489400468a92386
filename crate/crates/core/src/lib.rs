//! Streaming network anomography.
//!
//! Link measurements are embedded into a Hankel-structured tensor whose
//! normal part is tracked online as a low-rank CP model, while abnormal
//! origin-destination flows are recovered per step as the sparse solution of
//! an under-determined routing inverse problem.

pub mod admm;
pub mod baselines;
pub mod error;
pub mod hankel;
pub mod io;
pub mod metrics;
pub mod netgen;
pub mod pipeline;
pub mod subspace;
pub mod traffic;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate, AnomalyEvent, AnomalyStructure, AnomalyVector, CpModel, Hyperparams, Mask,
    ObservedSlice, RlsCaches, RoutingMatrix, Violation,
};
