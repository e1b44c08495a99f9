//! Edge utilities and objective evaluation.
//!
//! Every edge `(x, y)` carries a target utility `t_xy` and a source utility
//! `s_xy`, both increasing and concave on `pi >= 0`. The centralized objective
//! weights each edge by the type count `P_t(x) N`; the per-type local cost used
//! by the federated solver is unweighted.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::network::{check_matrix_shape, Bounds, Network, Plan, TypeDistribution};

/// A scalar utility on `pi >= 0` supplied by the caller.
pub trait ScalarUtility: Send + Sync {
    fn value(&self, pi: f64) -> f64;
    fn derivative(&self, pi: f64) -> f64;
    /// Used by Newton steps when available; bisection is used otherwise.
    fn second_derivative(&self, _pi: f64) -> Option<f64> {
        None
    }
}

#[derive(Clone)]
pub enum EdgeUtility {
    /// `a * pi`
    Linear(f64),
    /// `a * ln(1 + pi)`
    Log(f64),
    /// `a * sqrt(pi)`
    Sqrt(f64),
    Custom(Arc<dyn ScalarUtility>),
}

impl fmt::Debug for EdgeUtility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear(a) => write!(f, "Linear({a})"),
            Self::Log(a) => write!(f, "Log({a})"),
            Self::Sqrt(a) => write!(f, "Sqrt({a})"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl EdgeUtility {
    pub fn value(&self, pi: f64) -> f64 {
        match self {
            Self::Linear(a) => a * pi,
            Self::Log(a) => a * pi.ln_1p(),
            Self::Sqrt(a) => a * pi.sqrt(),
            Self::Custom(u) => u.value(pi),
        }
    }

    pub fn derivative(&self, pi: f64) -> f64 {
        match self {
            Self::Linear(a) => *a,
            Self::Log(a) => a / (1.0 + pi),
            Self::Sqrt(a) => {
                if *a == 0.0 {
                    0.0
                } else {
                    a / (2.0 * pi.sqrt())
                }
            }
            Self::Custom(u) => u.derivative(pi),
        }
    }

    pub fn second_derivative(&self, pi: f64) -> Option<f64> {
        match self {
            Self::Linear(_) => Some(0.0),
            Self::Log(a) => Some(-a / ((1.0 + pi) * (1.0 + pi))),
            Self::Sqrt(a) => {
                if *a == 0.0 {
                    Some(0.0)
                } else {
                    Some(-a / (4.0 * pi * pi.sqrt()))
                }
            }
            Self::Custom(u) => u.second_derivative(pi),
        }
    }

    /// Slope when the utility is linear.
    pub fn linear_coefficient(&self) -> Option<f64> {
        match self {
            Self::Linear(a) => Some(*a),
            _ => None,
        }
    }

    fn check_shape(&self) -> Result<()> {
        const GRID: [f64; 10] = [1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1e4];
        let mut prev = f64::INFINITY;
        for &pi in &GRID {
            let d = self.derivative(pi);
            if !d.is_finite() || !self.value(pi).is_finite() {
                return Err(Error::InvalidUtility(format!("{self:?} is not finite at {pi}")));
            }
            if d < 0.0 {
                return Err(Error::InvalidUtility(format!("{self:?} is decreasing at {pi}")));
            }
            if d > prev * (1.0 + 1e-12) + 1e-15 {
                return Err(Error::InvalidUtility(format!("{self:?} is not concave near {pi}")));
            }
            prev = d;
        }
        Ok(())
    }
}

/// Named built-in utility family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Linear,
    Log,
    Sqrt,
}

impl Family {
    pub fn make(self, coeff: f64) -> EdgeUtility {
        match self {
            Family::Linear => EdgeUtility::Linear(coeff),
            Family::Log => EdgeUtility::Log(coeff),
            Family::Sqrt => EdgeUtility::Sqrt(coeff),
        }
    }
}

/// Target and source utilities for every edge.
#[derive(Debug, Clone)]
pub struct UtilityModel {
    target: Vec<EdgeUtility>,
    source: Vec<EdgeUtility>,
    lipschitz_sum: Option<f64>,
}

impl UtilityModel {
    pub fn new(network: &Network, target: Vec<EdgeUtility>, source: Vec<EdgeUtility>) -> Result<Self> {
        for v in [&target, &source] {
            if v.len() != network.n_edges() {
                return Err(Error::DimensionMismatch {
                    expected: network.n_edges(),
                    got: v.len(),
                });
            }
        }
        for u in target.iter().chain(&source) {
            u.check_shape()?;
        }
        Ok(Self {
            target,
            source,
            lipschitz_sum: None,
        })
    }

    /// Linear utilities `t_xy = delta_xy pi`, `s_xy = gamma_xy pi` from dense
    /// `|X| x |Y|` coefficient matrices.
    pub fn linear(network: &Network, delta: &[Vec<f64>], gamma: &[Vec<f64>]) -> Result<Self> {
        Self::from_family(network, Family::Linear, delta, gamma)
    }

    pub fn from_family(
        network: &Network,
        family: Family,
        target_coeff: &[Vec<f64>],
        source_coeff: &[Vec<f64>],
    ) -> Result<Self> {
        check_matrix_shape(network, target_coeff)?;
        check_matrix_shape(network, source_coeff)?;
        let target = network
            .edges()
            .iter()
            .map(|&(x, y)| family.make(target_coeff[x][y]))
            .collect();
        let source = network
            .edges()
            .iter()
            .map(|&(x, y)| family.make(source_coeff[x][y]))
            .collect();
        Self::new(network, target, source)
    }

    /// Overrides the `L_s + L_t` constant reported to the convergence diagnostics.
    pub fn with_lipschitz_sum(mut self, l: f64) -> Self {
        self.lipschitz_sum = Some(l);
        self
    }

    pub fn target(&self, e: usize) -> &EdgeUtility {
        &self.target[e]
    }

    pub fn source(&self, e: usize) -> &EdgeUtility {
        &self.source[e]
    }

    /// `t_e(pi) + s_e(pi)`
    pub fn edge_value(&self, e: usize, pi: f64) -> f64 {
        self.target[e].value(pi) + self.source[e].value(pi)
    }

    pub fn edge_derivative(&self, e: usize, pi: f64) -> f64 {
        self.target[e].derivative(pi) + self.source[e].derivative(pi)
    }

    pub fn edge_second_derivative(&self, e: usize, pi: f64) -> Option<f64> {
        Some(self.target[e].second_derivative(pi)? + self.source[e].second_derivative(pi)?)
    }

    /// Combined slope `delta + gamma` when both utilities of the edge are linear.
    pub fn edge_linear_coefficient(&self, e: usize) -> Option<f64> {
        Some(self.target[e].linear_coefficient()? + self.source[e].linear_coefficient()?)
    }

    pub fn is_linear(&self) -> bool {
        (0..self.target.len()).all(|e| self.edge_linear_coefficient(e).is_some())
    }

    /// `L_s + L_t`: the configured value, or the largest per-edge derivative at
    /// zero times `sqrt(2|E|)`.
    pub fn lipschitz_sum(&self) -> f64 {
        if let Some(l) = self.lipschitz_sum {
            return l;
        }
        let max_slope = self
            .target
            .iter()
            .chain(&self.source)
            .map(|u| u.derivative(0.0))
            .fold(0.0, f64::max);
        max_slope * ((2 * self.target.len()) as f64).sqrt()
    }
}

/// Centralized objective: `sum_e (t_e(pi_e) + s_e(pi_e)) P_t(x) N`.
pub fn total_objective(plan: &Plan, network: &Network, utility: &UtilityModel, dist: &TypeDistribution) -> f64 {
    network
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(x, _))| utility.edge_value(e, plan[e]) * dist.count(x))
        .sum()
}

/// Gradient of [`total_objective`] with respect to the plan.
pub fn total_objective_gradient(
    plan: &Plan,
    network: &Network,
    utility: &UtilityModel,
    dist: &TypeDistribution,
) -> Result<Vec<f64>> {
    network
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(x, _))| {
            let d = utility.edge_derivative(e, plan[e]);
            if d.is_finite() {
                Ok(d * dist.count(x))
            } else {
                Err(Error::NonDifferentiable { at: plan[e] })
            }
        })
        .collect()
}

/// Unweighted cost attached to type `x`: `-sum_{y in Y_x} (t_xy + s_xy)(pi_xy)`.
pub fn local_cost(plan: &Plan, network: &Network, utility: &UtilityModel, x: usize) -> f64 {
    -network
        .type_edges(x)
        .iter()
        .map(|&e| utility.edge_value(e, plan[e]))
        .sum::<f64>()
}

/// Gradient of [`local_cost`] as a full edge-indexed vector (zero off type `x`).
pub fn subgradient_local_cost(plan: &Plan, network: &Network, utility: &UtilityModel, x: usize) -> Result<Vec<f64>> {
    let mut g = vec![0.0; network.n_edges()];
    for &e in network.type_edges(x) {
        let d = utility.edge_derivative(e, plan[e]);
        if !d.is_finite() {
            return Err(Error::NonDifferentiable { at: plan[e] });
        }
        g[e] = -d;
    }
    Ok(g)
}

/// A complete problem: topology, utilities, bounds and population.
#[derive(Debug, Clone)]
pub struct Instance {
    pub network: Network,
    pub utility: UtilityModel,
    pub bounds: Bounds,
    pub dist: TypeDistribution,
}

impl Instance {
    pub fn new(network: Network, utility: UtilityModel, bounds: Bounds, dist: TypeDistribution) -> Result<Self> {
        bounds.validate(&network)?;
        dist.validate(&network)?;
        if utility.target.len() != network.n_edges() {
            return Err(Error::DimensionMismatch {
                expected: network.n_edges(),
                got: utility.target.len(),
            });
        }
        Ok(Self {
            network,
            utility,
            bounds,
            dist,
        })
    }

    pub fn objective(&self, plan: &Plan) -> f64 {
        total_objective(plan, &self.network, &self.utility, &self.dist)
    }

    pub fn with_distribution(&self, dist: TypeDistribution) -> Result<Self> {
        Self::new(self.network.clone(), self.utility.clone(), self.bounds.clone(), dist)
    }

    pub fn counts(&self) -> Vec<f64> {
        self.dist.counts()
    }
}
