use thiserror::Error;

use crate::admm::AdmmSolution;
use crate::projection::ProjectionReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("node `{0}` has no incident edges")]
    IsolatedNode(String),
    #[error("edge ({0}, {1}) listed more than once")]
    DuplicateEdge(String, String),
    #[error("identifier `{0}` listed more than once")]
    DuplicateIdentifier(String),
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid type distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid utility: {0}")]
    InvalidUtility(String),
    #[error("utility is not differentiable at {at}")]
    NonDifferentiable { at: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row for type {0} does not match its edge count")]
    RowMismatch(usize),
    #[error("constraint set is empty: {0}")]
    Infeasible(String),
    #[error("feasible polytope is empty (violation stalled at {violation:.3e})")]
    EmptyFeasibleSet { violation: f64 },
    #[error("projection did not converge: {0:?}")]
    DidNotConverge(ProjectionReport),
    #[error("Newton iteration did not converge and bisection fallback failed")]
    NewtonDidNotConverge,
    #[error("solver stopped after {} iterations without meeting tolerances", .0.iterations)]
    MaxIterationsExceeded(Box<AdmmSolution>),
    #[error("instance too large for exhaustive search ({edges} edges, limit {limit})")]
    TooLarge { edges: usize, limit: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("check failed at {} point(s): {}", .0.len(), .0.join("; "))]
    CheckFailed(Vec<String>),
}
