//! Optimal transport over large typed populations.
//!
//! The transport plan assigns an amount per edge of a bipartite network between
//! target types and sources, expressed per target node of the edge's type.
//! Two solvers are provided: consensus ADMM when the type distribution is
//! known ([`admm`]) and a federated proximal method with projection when it
//! has to be learned from samples ([`fedlearn`]). [`oracle`] holds reference
//! solvers and numerical checks of the convergence theory.

pub mod admm;
pub mod error;
pub mod fedlearn;
pub mod network;
pub mod oracle;
pub mod projection;
mod scalar;
pub mod utility;

pub use admm::{admm_solve, AdmmConfig, AdmmSolution, AdmmState};
pub use error::{Error, Result};
pub use fedlearn::{fl_run, FlOptions, FlRun, ShiftEvent, StepSchedule};
pub use network::{feasibility_residual, Bounds, Network, Plan, TypeDistribution};
pub use projection::{project_feasible_plan, BoxSumSet, ProjectionReport};
pub use utility::{EdgeUtility, Family, Instance, UtilityModel};
