//! Learning recurrent controllers for Signal Temporal Logic specifications
//! on plants with unknown dynamics.
//!
//! The crate alternates two phases. A dropout feedforward network is fit to
//! observed transitions ([`model_learning`]), and a recurrent policy is
//! improved on that learned model by co-state (adjoint) gradients of a smooth
//! robustness score ([`policy_opt`]). Every run on the real plant is filtered
//! through a discrete-time control barrier function evaluated on the learned
//! model ([`safety`]). [`orchestrator`] drives the outer loop.

pub mod diffgraph;
pub mod model_learning;
pub mod nets;
pub mod orchestrator;
pub mod policy_opt;
pub mod safety;
pub mod stl;
pub mod world;
