//! Hosting-capacity analysis for radial distribution feeders.
//!
//! The feeder is modelled with the DistFlow branch-flow equations. The
//! hosting problem is first relaxed to a second-order cone program and then
//! driven back onto the exact power-flow manifold by a sequence of
//! penalty-free convex corrections.

pub mod branchflow;
pub mod conic;
pub mod feeder;
pub mod iteration;
pub mod relax;

pub use branchflow::{BranchFlowState, FlowError, GapVector};
pub use conic::{ConeProgram, ConeSolution, SolveOptions, SolveStatus};
pub use feeder::{FeederBuilder, FeederError, FeederModel, LoadScaling};
