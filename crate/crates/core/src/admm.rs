//! Consensus ADMM for the known-distribution problem.
//!
//! Each target type and each source keeps its own copy of the plan (`plan_t`,
//! `plan_s`); the consensus plan is their average and a single multiplier per
//! edge drives the two copies together. One iteration:
//!
//! 1. every type `x` solves its proximal subproblem over `{pi >= 0, p_lo <= sum_y pi <= p_hi}`;
//! 2. every source `y` solves its subproblem over `{pi >= 0, q_lo <= sum_x pi P_t(x) N <= q_hi}`;
//! 3. `pi = (pi_t + pi_s) / 2`;
//! 4. `alpha += eta / 2 (pi_t - pi_s)`.
//!
//! The objective follows the reformulated problem (weights `P_t(x)`, no `N`).

use crate::error::{Error, Result};
use crate::network::Plan;
use crate::projection::BoxSumSet;
use crate::scalar::increasing_root;
use crate::utility::{EdgeUtility, Instance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub eta: f64,
    pub max_iterations: usize,
    /// Tolerance on `max |pi_t - pi_s|`.
    pub primal_tol: f64,
    /// Tolerance on `max |pi(k+1) - pi(k)|`.
    pub dual_tol: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            max_iterations: 50_000,
            primal_tol: 1e-6,
            dual_tol: 1e-7,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.primal_tol > 0.0 && self.dual_tol > 0.0) {
            return Err(Error::InvalidParameter("ADMM tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub plan_t: Plan,
    pub plan_s: Plan,
    pub plan: Plan,
    pub alpha: Vec<f64>,
    pub eta: f64,
    pub iteration: usize,
}

impl AdmmState {
    /// All copies and multipliers start at zero.
    pub fn new(instance: &Instance, eta: f64) -> Self {
        let zero = Plan::zeros(&instance.network);
        Self {
            plan_t: zero.clone(),
            plan_s: zero.clone(),
            plan: zero,
            alpha: vec![0.0; instance.network.n_edges()],
            eta,
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmTraceRow {
    pub iteration: usize,
    /// Centralized objective of the consensus plan.
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmSolution {
    pub plan: Plan,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub state: AdmmState,
    pub trace: Vec<AdmmTraceRow>,
}

/// One coordinate of a separable subproblem:
/// `-scale * u(pi) + linear * pi + eta / 2 (pi - center)^2`.
struct Term<'a> {
    utility: &'a EdgeUtility,
    scale: f64,
    linear: f64,
    center: f64,
}

/// Minimizes a sum of [`Term`]s over a box-sum set.
fn solve_separable(terms: &[Term<'_>], eta: f64, set: &BoxSumSet) -> Result<Vec<f64>> {
    if terms.iter().all(|t| t.utility.linear_coefficient().is_some()) {
        let v: Vec<f64> = terms
            .iter()
            .map(|t| {
                let a = t.utility.linear_coefficient().unwrap_or(0.0);
                t.center + (t.scale * a - t.linear) / eta
            })
            .collect();
        return set.project(&v);
    }

    let weights = set.weights();
    let respond = |lambda: f64| -> Result<Vec<f64>> {
        terms
            .iter()
            .zip(weights)
            .map(|(t, &w)| {
                let shift = t.linear + lambda * w;
                increasing_root(
                    |p| -t.scale * t.utility.derivative(p) + shift + eta * (p - t.center),
                    |p| t.utility.second_derivative(p).map(|d2| -t.scale * d2 + eta),
                    0.0,
                    t.center,
                )
            })
            .collect()
    };
    let load = |pi: &[f64]| -> f64 { weights.iter().zip(pi).map(|(w, p)| w * p).sum() };

    let free = respond(0.0)?;
    let s = load(&free);
    let target = if s > set.hi() {
        set.hi()
    } else if s < set.lo() {
        set.lo()
    } else {
        return Ok(free);
    };
    // load(lambda) is nonincreasing in lambda
    let (mut below, mut above) = if s > target {
        let mut hi = 1.0;
        while load(&respond(hi)?) > target {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::Infeasible("upper sum bound unreachable".into()));
            }
        }
        (0.0, hi)
    } else {
        let mut lo = -1.0;
        while load(&respond(lo)?) < target {
            lo *= 2.0;
            if !lo.is_finite() {
                return Err(Error::Infeasible("lower sum bound unreachable".into()));
            }
        }
        (lo, 0.0)
    };
    let mut best = respond(0.5 * (below + above))?;
    for _ in 0..200 {
        let mid = 0.5 * (below + above);
        if mid <= below || mid >= above {
            break;
        }
        best = respond(mid)?;
        let g = load(&best);
        if (g - target).abs() <= 1e-12 * target.abs().max(1.0) {
            break;
        }
        if g > target {
            below = mid;
        } else {
            above = mid;
        }
    }
    Ok(best)
}

/// New target-side rows for type `x` (ordered by source).
pub fn target_update(state: &AdmmState, instance: &Instance, x: usize) -> Result<Vec<f64>> {
    let net = &instance.network;
    let edges = net.type_edges(x);
    let weight = instance.dist.prob()[x];
    let terms: Vec<Term<'_>> = edges
        .iter()
        .map(|&e| Term {
            utility: instance.utility.target(e),
            scale: weight,
            linear: state.alpha[e],
            center: state.plan[e],
        })
        .collect();
    let set = BoxSumSet::uniform(edges.len(), instance.bounds.p_lo[x], instance.bounds.p_hi[x])?;
    solve_separable(&terms, state.eta, &set)
}

/// New source-side rows for source `y` (ordered by type).
pub fn source_update(state: &AdmmState, instance: &Instance, y: usize) -> Result<Vec<f64>> {
    let net = &instance.network;
    let edges = net.source_edges(y);
    let terms: Vec<Term<'_>> = edges
        .iter()
        .map(|&e| Term {
            utility: instance.utility.source(e),
            scale: instance.dist.prob()[net.edges()[e].0],
            linear: -state.alpha[e],
            center: state.plan[e],
        })
        .collect();
    let weights = edges.iter().map(|&e| instance.dist.count(net.edges()[e].0)).collect();
    let set = BoxSumSet::new(weights, instance.bounds.q_lo[y], instance.bounds.q_hi[y], true)?;
    solve_separable(&terms, state.eta, &set)
}

/// Per-edge average of the two copies.
pub fn consensus_update(state: &AdmmState) -> Plan {
    let values = state
        .plan_t
        .values()
        .iter()
        .zip(state.plan_s.values())
        .map(|(t, s)| 0.5 * (t + s))
        .collect::<Vec<_>>();
    let mut plan = state.plan.clone();
    plan.values_mut().copy_from_slice(&values);
    plan
}

/// `alpha + eta / 2 (pi_t - pi_s)`
pub fn dual_update(state: &AdmmState) -> Vec<f64> {
    state
        .alpha
        .iter()
        .zip(state.plan_t.values().iter().zip(state.plan_s.values()))
        .map(|(a, (t, s))| a + 0.5 * state.eta * (t - s))
        .collect()
}

/// Runs one full iteration in place; returns `(primal, dual)` residuals.
pub fn admm_iteration(state: &mut AdmmState, instance: &Instance) -> Result<(f64, f64)> {
    let net = &instance.network;
    let mut plan_t = state.plan_t.clone();
    for x in 0..net.n_types() {
        let rows = target_update(state, instance, x)?;
        for (&e, v) in net.type_edges(x).iter().zip(rows) {
            plan_t[e] = v;
        }
    }
    let mut plan_s = state.plan_s.clone();
    for y in 0..net.n_sources() {
        let rows = source_update(state, instance, y)?;
        for (&e, v) in net.source_edges(y).iter().zip(rows) {
            plan_s[e] = v;
        }
    }
    state.plan_t = plan_t;
    state.plan_s = plan_s;
    let plan = consensus_update(state);
    state.alpha = dual_update(state);
    let primal = state.plan_t.max_abs_diff(&state.plan_s);
    let dual = plan.max_abs_diff(&state.plan);
    state.plan = plan;
    state.iteration += 1;
    Ok((primal, dual))
}

/// Iterates until both residual tolerances hold.
///
/// On hitting `max_iterations` the error carries the last iterate and the
/// trace.
pub fn admm_solve(instance: &Instance, config: &AdmmConfig) -> Result<AdmmSolution> {
    config.validate()?;
    let mut state = AdmmState::new(instance, config.eta);
    let mut trace = Vec::new();
    let mut converged = false;
    while state.iteration < config.max_iterations {
        let (primal, dual) = admm_iteration(&mut state, instance)?;
        trace.push(AdmmTraceRow {
            iteration: state.iteration,
            objective: instance.objective(&state.plan),
            primal_residual: primal,
            dual_residual: dual,
        });
        if primal <= config.primal_tol && dual <= config.dual_tol {
            converged = true;
            break;
        }
    }
    let solution = AdmmSolution {
        plan: state.plan.clone(),
        objective: instance.objective(&state.plan),
        iterations: state.iteration,
        converged,
        state,
        trace,
    };
    if converged {
        Ok(solution)
    } else {
        Err(Error::MaxIterationsExceeded(Box::new(solution)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Bounds, Network, TypeDistribution};
    use crate::utility::UtilityModel;

    fn one_edge(delta: f64, gamma: f64, prob_n: u64, p_hi: f64, q_hi: f64) -> Instance {
        let net = Network::complete(1, 1).unwrap();
        let u = UtilityModel::linear(&net, &[vec![delta]], &[vec![gamma]]).unwrap();
        let b = Bounds::upper(vec![p_hi], vec![q_hi]).unwrap();
        let d = TypeDistribution::new(vec![1.0], prob_n).unwrap();
        Instance::new(net, u, b, d).unwrap()
    }

    fn two_types(prob: [f64; 2]) -> Instance {
        let net = Network::complete(2, 1).unwrap();
        let u = UtilityModel::linear(&net, &[vec![2.0], vec![1.0]], &[vec![3.0], vec![3.0]]).unwrap();
        let b = Bounds::upper(vec![100.0, 100.0], vec![1e6]).unwrap();
        let d = TypeDistribution::new(prob.to_vec(), 10).unwrap();
        Instance::new(net, u, b, d).unwrap()
    }

    #[test]
    fn target_zero_objective_keeps_rows() {
        let inst = one_edge(0.0, 0.0, 1, 10.0, 10.0);
        let mut s = AdmmState::new(&inst, 1.0);
        s.plan[0] = 0.7;
        assert_eq!(target_update(&s, &inst, 0).unwrap(), vec![0.7]);
        assert_eq!(source_update(&s, &inst, 0).unwrap(), vec![0.7]);
    }

    #[test]
    fn target_first_order_condition() {
        // delta = 2, P_t(x) = 0.5, alpha = 0.4, eta = 1, pi(k) = 1
        let inst = two_types([0.5, 0.5]);
        let mut s = AdmmState::new(&inst, 1.0);
        s.plan[0] = 1.0;
        s.alpha[0] = 0.4;
        let rows = target_update(&s, &inst, 0).unwrap();
        assert!((rows[0] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn source_first_order_condition() {
        // gamma = 3, P_t(x) = 0.2, alpha = 0.1, eta = 2, pi(k) = 0
        let inst = two_types([0.2, 0.8]);
        let mut s = AdmmState::new(&inst, 2.0);
        s.alpha[0] = 0.1;
        let rows = source_update(&s, &inst, 0).unwrap();
        assert!((rows[0] - 0.35).abs() < 1e-12, "{rows:?}");
    }

    #[test]
    fn consensus_and_dual_arithmetic() {
        let inst = one_edge(1.0, 1.0, 1, 10.0, 10.0);
        let mut s = AdmmState::new(&inst, 2.0);
        s.plan_t[0] = 2.0;
        s.plan_s[0] = 4.0;
        assert_eq!(consensus_update(&s)[0], 3.0);
        s.plan_t[0] = 3.0;
        s.plan_s[0] = 1.0;
        assert_eq!(dual_update(&s), vec![2.0]);
        s.plan_t[0] = 1.0;
        s.plan_s[0] = 1.0;
        assert_eq!(consensus_update(&s)[0], 1.0);
        assert_eq!(dual_update(&s), vec![0.0]);
        s.plan_t[0] = 0.5;
        assert!(dual_update(&s)[0] < 0.0);
    }

    #[test]
    fn single_edge_reaches_type_cap() {
        let inst = one_edge(1.0, 2.0, 5, 2.0, 1e6);
        let sol = admm_solve(&inst, &AdmmConfig::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.plan[0] - 2.0).abs() < 1e-5, "{:?}", sol.plan);
    }

    #[test]
    fn zero_utilities_converge_to_zero() {
        let inst = one_edge(0.0, 0.0, 5, 2.0, 10.0);
        let sol = admm_solve(&inst, &AdmmConfig::default()).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn log_utilities_match_first_order_condition() {
        // single edge, t = log(1 + pi), s = 0, loose bounds: optimum is unbounded
        // growth capped by p_hi, so the cap binds.
        let net = Network::complete(1, 1).unwrap();
        let u = UtilityModel::new(&net, vec![EdgeUtility::Log(1.0)], vec![EdgeUtility::Log(0.5)]).unwrap();
        let b = Bounds::upper(vec![3.0], vec![1e6]).unwrap();
        let d = TypeDistribution::new(vec![1.0], 4).unwrap();
        let inst = Instance::new(net, u, b, d).unwrap();
        let sol = admm_solve(&inst, &AdmmConfig::default()).unwrap();
        assert!((sol.plan[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn max_iterations_carries_iterate() {
        let inst = one_edge(1.0, 2.0, 5, 2.0, 1e6);
        let cfg = AdmmConfig {
            max_iterations: 3,
            ..AdmmConfig::default()
        };
        match admm_solve(&inst, &cfg) {
            Err(Error::MaxIterationsExceeded(sol)) => {
                assert_eq!(sol.iterations, 3);
                assert_eq!(sol.trace.len(), 3);
                assert!(!sol.converged);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let inst = one_edge(1.0, 2.0, 5, 2.0, 1e6);
        let sol = admm_solve(
            &inst,
            &AdmmConfig {
                primal_tol: 1e-13,
                dual_tol: 1e-13,
                ..AdmmConfig::default()
            },
        )
        .unwrap();
        let mut state = sol.state.clone();
        admm_iteration(&mut state, &inst).unwrap();
        assert!(state.plan.max_abs_diff(&sol.state.plan) <= 1e-12);
        assert!(state
            .alpha
            .iter()
            .zip(&sol.state.alpha)
            .all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}
