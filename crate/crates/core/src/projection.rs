//! Euclidean projections onto the constraint sets of the transport problem.
//!
//! The building block is a [`BoxSumSet`], `{v : v >= 0, lo <= w.v <= hi}`,
//! projected by bisection on the scalar multiplier of the active sum
//! constraint. Intersections of such sets (one per type row, one per source
//! column) are handled with Dykstra's algorithm, which converges to the
//! nearest point of the intersection rather than an arbitrary feasible one.
//! Every few sweeps the constraints that look tight are solved exactly as
//! equalities, and the result is accepted once it passes the optimality
//! conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Bounds, Network, Plan};

pub const BISECTION_TOL: f64 = 1e-12;
pub const VIOLATION_TOL: f64 = 1e-9;
pub const STEP_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 10_000;

const MAX_BISECTIONS: usize = 200;
const STALL_SWEEPS: usize = 3;
/// Sweeps between attempts to finish a Dykstra run with an exact active-set solve.
const FINISH_EVERY: usize = 10;
/// Relative slack under which a constraint is guessed active from an iterate.
const ACTIVE_TOL: f64 = 1e-6;
/// Relative tolerance on the sign conditions of the optimality check.
const KKT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSumSet {
    weights: Vec<f64>,
    lo: f64,
    hi: f64,
    nonneg: bool,
}

impl BoxSumSet {
    pub fn new(weights: Vec<f64>, lo: f64, hi: f64, nonneg: bool) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(
                "box-sum weights must be finite and nonnegative".into(),
            ));
        }
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Infeasible(format!("sum bounds [{lo}, {hi}]")));
        }
        let reachable = if nonneg {
            weights.iter().any(|&w| w > 0.0) || lo <= 0.0
        } else {
            weights.iter().any(|&w| w > 0.0) || (lo <= 0.0 && hi >= 0.0)
        };
        if !reachable || (nonneg && hi < 0.0) {
            return Err(Error::Infeasible(format!(
                "sum bounds [{lo}, {hi}] unreachable with these weights"
            )));
        }
        Ok(Self {
            weights,
            lo,
            hi,
            nonneg,
        })
    }

    /// `{v >= 0 : lo <= sum(v) <= hi}`
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![1.0; n], lo, hi, true)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn weighted_sum(&self, v: &[f64]) -> f64 {
        self.weights.iter().zip(v).map(|(w, x)| w * x).sum()
    }

    /// Largest Euclidean distance from `v` to one of the half-spaces (or the
    /// nonnegative orthant) that make up the set.
    pub fn violation(&self, v: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        if self.nonneg {
            for &x in v {
                worst = worst.max(-x);
            }
        }
        let norm = self.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            let s = self.weighted_sum(v);
            worst = worst.max((s - self.hi) / norm).max((self.lo - s) / norm);
        } else if self.lo > 0.0 {
            worst = f64::INFINITY;
        }
        worst
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        self.violation(v) <= tol
    }

    /// `sum_i w_i max(0, v_i - lambda w_i)`
    fn clipped_sum(&self, v: &[f64], lambda: f64) -> f64 {
        self.weights
            .iter()
            .zip(v)
            .map(|(w, x)| w * (x - lambda * w).max(0.0))
            .sum()
    }

    fn shift(&self, v: &[f64], lambda: f64) -> Vec<f64> {
        self.weights
            .iter()
            .zip(v)
            .map(|(w, x)| {
                let u = x - lambda * w;
                if self.nonneg {
                    u.max(0.0)
                } else {
                    u
                }
            })
            .collect()
    }

    /// Euclidean projection of `v` onto the set.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        if !self.nonneg {
            return Ok(self.project_slab(v));
        }
        let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
        let s = self.weighted_sum(&clipped);
        let target = if s > self.hi {
            self.hi
        } else if s < self.lo {
            self.lo
        } else {
            return Ok(clipped);
        };

        // g(lambda) = clipped_sum is continuous and nonincreasing; find g = target.
        let (mut below, mut above) = if s > self.hi {
            // g(0) > target; g(lambda_max) = 0 <= target.
            let top = self
                .weights
                .iter()
                .zip(v)
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, x)| x / w)
                .fold(0.0, f64::max);
            let mut hi = top + 1.0;
            while self.clipped_sum(v, hi) > target {
                hi *= 2.0;
            }
            (0.0, hi)
        } else {
            let mut lo = -1.0;
            while self.clipped_sum(v, lo) < target {
                lo *= 2.0;
                if !lo.is_finite() {
                    return Err(Error::Infeasible("lower sum bound unreachable".into()));
                }
            }
            (lo, 0.0)
        };
        // invariant: g(below) >= target >= g(above)
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (below + above);
            if mid <= below || mid >= above {
                break;
            }
            let g = self.clipped_sum(v, mid);
            if (g - target).abs() <= BISECTION_TOL * target.abs().max(1.0) {
                below = mid;
                above = mid;
                break;
            }
            if g > target {
                below = mid;
            } else {
                above = mid;
            }
        }
        let lambda = 0.5 * (below + above);
        let lambda = self.polish(v, lambda, target).unwrap_or(lambda);
        Ok(self.shift(v, lambda))
    }

    /// Solves the linear equation for the multiplier on the active set found by
    /// bisection. Returns `None` if the active set is inconsistent with the
    /// solution.
    fn polish(&self, v: &[f64], lambda: f64, target: f64) -> Option<f64> {
        let mut wv = 0.0;
        let mut ww = 0.0;
        for (w, x) in self.weights.iter().zip(v) {
            if *w > 0.0 && x - lambda * w > 0.0 {
                wv += w * x;
                ww += w * w;
            }
        }
        if ww == 0.0 {
            return None;
        }
        let exact = (wv - target) / ww;
        let scale = lambda.abs().max(1e-300);
        let consistent = self.weights.iter().zip(v).all(|(w, x)| {
            if *w == 0.0 {
                return true;
            }
            let before = x - lambda * w > 0.0;
            let after = x - exact * w;
            if before {
                after >= -1e-12 * x.abs().max(1.0)
            } else {
                after <= 1e-12 * x.abs().max(1.0)
            }
        });
        if consistent && (exact - lambda).abs() <= 1e-6 * scale.max(1.0) {
            Some(exact)
        } else {
            None
        }
    }

    fn project_slab(&self, v: &[f64]) -> Vec<f64> {
        let s = self.weighted_sum(v);
        let ww: f64 = self.weights.iter().map(|w| w * w).sum();
        let target = if s > self.hi {
            self.hi
        } else if s < self.lo {
            self.lo
        } else {
            return v.to_vec();
        };
        self.shift(v, (s - target) / ww)
    }
}

/// A [`BoxSumSet`] acting on a subset of the coordinates of a larger vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub indices: Vec<usize>,
    pub set: BoxSumSet,
}

impl Block {
    fn gather(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }

    pub fn violation(&self, x: &[f64]) -> f64 {
        self.set.violation(&self.gather(x))
    }

    /// Projection of the full vector `x` onto this block (other coordinates
    /// are left alone).
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.set.project(&self.gather(x))?;
        let mut out = x.to_vec();
        for (&i, v) in self.indices.iter().zip(p) {
            out[i] = v;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub sweeps: usize,
    pub violation: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DykstraOptions {
    /// Largest allowed distance to any single constraint at exit.
    pub violation_tol: f64,
    /// Largest allowed coordinate change over the final sweep.
    pub step_tol: f64,
    pub max_sweeps: usize,
}

impl Default for DykstraOptions {
    fn default() -> Self {
        Self {
            violation_tol: VIOLATION_TOL,
            step_tol: STEP_TOL,
            max_sweeps: MAX_SWEEPS,
        }
    }
}

pub fn max_block_violation(x: &[f64], blocks: &[Block]) -> f64 {
    blocks.iter().map(|b| b.violation(x)).fold(0.0, f64::max)
}

/// Dykstra's cyclic projection onto the intersection of `blocks`.
///
/// Stops once every block is satisfied within `violation_tol` and a full sweep
/// moves no coordinate by more than `step_tol` (relative to the iterate's
/// magnitude). Sweeps that end where they started while a constraint is
/// still violated mean the intersection is empty.
pub fn dykstra(point: &[f64], blocks: &[Block], opts: &DykstraOptions) -> Result<(Vec<f64>, ProjectionReport)> {
    let mut x = point.to_vec();
    let mut corrections: Vec<Vec<f64>> = blocks.iter().map(|b| vec![0.0; b.indices.len()]).collect();
    let mut buf = Vec::new();
    let mut violation = f64::INFINITY;
    let mut stalled = 0;
    for sweep in 1..=opts.max_sweeps {
        let start = x.clone();
        let mut movement = 0.0_f64;
        for (block, corr) in blocks.iter().zip(corrections.iter_mut()) {
            buf.clear();
            buf.extend(block.indices.iter().zip(corr.iter()).map(|(&i, c)| x[i] + c));
            let p = block.set.project(&buf)?;
            for (k, &i) in block.indices.iter().enumerate() {
                corr[k] = buf[k] - p[k];
                movement = movement.max((p[k] - x[i]).abs());
                x[i] = p[k];
            }
        }
        violation = max_block_violation(&x, blocks);
        let scale = x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if violation <= opts.violation_tol && movement <= opts.step_tol * scale {
            return Ok((
                x,
                ProjectionReport {
                    sweeps: sweep,
                    violation,
                    converged: true,
                },
            ));
        }
        // Dykstra drains the correction of a nearly active constraint by its slack
        // per sweep, which can take millions of sweeps. Try the exact solution on
        // the active set the iterate suggests.
        if sweep % FINISH_EVERY == 0 {
            if let Some(u) = active_set_finish(point, &x, blocks, opts.violation_tol) {
                let violation = max_block_violation(&u, blocks);
                return Ok((
                    u,
                    ProjectionReport {
                        sweeps: sweep,
                        violation,
                        converged: true,
                    },
                ));
            }
        }
        // With an empty intersection the iterate returns to the same point after
        // every sweep while the corrections keep growing.
        let drift = x.iter().zip(&start).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if violation > opts.violation_tol && drift <= f64::EPSILON * scale {
            stalled += 1;
            if stalled >= STALL_SWEEPS {
                return Err(Error::EmptyFeasibleSet { violation });
            }
        } else {
            stalled = 0;
        }
    }
    Err(Error::DidNotConverge(ProjectionReport {
        sweeps: opts.max_sweeps,
        violation,
        converged: false,
    }))
}

/// An active sum constraint `a.u = bound`; `upper` marks the `hi` side.
struct ActiveRow {
    block: usize,
    bound: f64,
    upper: bool,
}

/// Solves `min |u - v|^2` with the rows in `active` as equalities and the
/// coordinates in `zero` fixed at 0. Rows dependent on earlier ones get a zero
/// multiplier. Returns the point and one multiplier per active row.
fn equality_projection(v: &[f64], blocks: &[Block], active: &[ActiveRow], zero: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let dense = |r: &ActiveRow| -> Vec<f64> {
        let mut a = vec![0.0; n];
        for (&i, &w) in blocks[r.block].indices.iter().zip(blocks[r.block].set.weights()) {
            if !zero[i] {
                a[i] = w;
            }
        }
        a
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    // keep a linearly independent subset (Gram-Schmidt on the free coordinates)
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<(usize, Vec<f64>)> = Vec::new();
    for (k, r) in active.iter().enumerate() {
        let a = dense(r);
        let norm = dot(&a, &a).sqrt();
        let mut res = a.clone();
        for q in &basis {
            let c = dot(q, &res);
            for (x, y) in res.iter_mut().zip(q) {
                *x -= c * y;
            }
        }
        let rn = dot(&res, &res).sqrt();
        if norm > 0.0 && rn > 1e-10 * norm {
            basis.push(res.iter().map(|x| x / rn).collect());
            kept.push((k, a));
        }
    }

    let m = kept.len();
    let mut g: Vec<Vec<f64>> = kept
        .iter()
        .map(|(_, a)| kept.iter().map(|(_, b)| dot(a, b)).collect())
        .collect();
    let mut rhs: Vec<f64> = kept.iter().map(|(k, a)| dot(a, v) - active[*k].bound).collect();
    // Gaussian elimination with partial pivoting; the kept rows make `g` nonsingular
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| g[i][col].abs().total_cmp(&g[j][col].abs()))
            .unwrap_or(col);
        g.swap(col, piv);
        rhs.swap(col, piv);
        let (top, below) = g.split_at_mut(col + 1);
        let pivot = &top[col];
        for (r, row) in below.iter_mut().enumerate() {
            let f = row[col] / pivot[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            rhs[col + 1 + r] -= f * rhs[col];
        }
    }
    let mut sol = vec![0.0; m];
    for r in (0..m).rev() {
        let tail: f64 = (r + 1..m).map(|c| g[r][c] * sol[c]).sum();
        sol[r] = (rhs[r] - tail) / g[r][r];
    }

    let mut lambda = vec![0.0; active.len()];
    let mut u: Vec<f64> = v.iter().zip(zero).map(|(&x, &z)| if z { 0.0 } else { x }).collect();
    for ((k, a), l) in kept.iter().zip(&sol) {
        lambda[*k] = *l;
        for (x, w) in u.iter_mut().zip(a) {
            *x -= l * w;
        }
    }
    (u, lambda)
}

/// Exact projection of `point` found by a short active-set search started
/// from the constraints that are (nearly) tight at the Dykstra iterate `x`.
/// Returns `None` unless the result satisfies the optimality conditions.
fn active_set_finish(point: &[f64], x: &[f64], blocks: &[Block], violation_tol: f64) -> Option<Vec<f64>> {
    let n = point.len();
    let scale = point.iter().chain(x).fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut nonneg = vec![false; n];
    for b in blocks.iter().filter(|b| b.set.nonneg) {
        for &i in &b.indices {
            nonneg[i] = true;
        }
    }
    let mut zero: Vec<bool> = (0..n).map(|i| nonneg[i] && x[i] <= ACTIVE_TOL * scale).collect();
    let mut active: Vec<ActiveRow> = Vec::new();
    for (k, b) in blocks.iter().enumerate() {
        let norm = b.set.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let s = b.set.weighted_sum(&b.gather(x));
        let slack = ACTIVE_TOL * scale * norm;
        if b.set.hi.is_finite() && b.set.hi - s <= slack {
            active.push(ActiveRow {
                block: k,
                bound: b.set.hi,
                upper: true,
            });
        } else if b.set.lo.is_finite() && s - b.set.lo <= slack {
            active.push(ActiveRow {
                block: k,
                bound: b.set.lo,
                upper: false,
            });
        }
    }

    let tol = KKT_TOL * scale;
    for _ in 0..2 * (n + blocks.len()) + 2 {
        let (u, lambda) = equality_projection(point, blocks, &active, &zero);
        // primal: a free coordinate went negative
        let neg = (0..n)
            .filter(|&i| nonneg[i] && !zero[i] && u[i] < -tol)
            .min_by(|&i, &j| u[i].total_cmp(&u[j]));
        if let Some(i) = neg {
            zero[i] = true;
            continue;
        }
        // dual: a multiplier with the wrong sign releases its constraint
        let wrong = (0..active.len())
            .map(|k| (k, if active[k].upper { -lambda[k] } else { lambda[k] }))
            .filter(|&(_, e)| e > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((k, _)) = wrong {
            active.remove(k);
            continue;
        }
        // dual: a fixed coordinate that would rather be positive
        let mut pull = vec![0.0; n];
        for (r, l) in active.iter().zip(&lambda) {
            for (&i, &w) in blocks[r.block].indices.iter().zip(blocks[r.block].set.weights()) {
                pull[i] += l * w;
            }
        }
        let free = (0..n)
            .filter(|&i| zero[i] && point[i] - pull[i] > tol)
            .max_by(|&i, &j| (point[i] - pull[i]).total_cmp(&(point[j] - pull[j])));
        if let Some(i) = free {
            zero[i] = false;
            continue;
        }
        // primal: a constraint outside the active set is violated
        let violated = blocks
            .iter()
            .enumerate()
            .filter(|(k, _)| active.iter().all(|r| r.block != *k))
            .map(|(k, b)| (k, b.violation(&u)))
            .filter(|&(_, v)| v > violation_tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((k, _)) = violated {
            let b = &blocks[k];
            let s = b.set.weighted_sum(&b.gather(&u));
            let upper = s > b.set.hi;
            let bound = if upper { b.set.hi } else { b.set.lo };
            active.push(ActiveRow { block: k, bound, upper });
            continue;
        }
        if max_block_violation(&u, blocks) <= violation_tol {
            return Some(u);
        }
        return None;
    }
    None
}

/// Constraint blocks of the transport polytope: one per type (`p_lo <= sum_y
/// pi_xy <= p_hi`) and one per source (`q_lo <= sum_x pi_xy w_x <= q_hi`),
/// each including `pi >= 0`.
pub fn feasible_blocks(network: &Network, bounds: &Bounds, weights: &[f64]) -> Result<Vec<Block>> {
    if weights.len() != network.n_types() {
        return Err(Error::DimensionMismatch {
            expected: network.n_types(),
            got: weights.len(),
        });
    }
    let mut blocks = Vec::with_capacity(network.n_types() + network.n_sources());
    for x in 0..network.n_types() {
        let idx = network.type_edges(x).to_vec();
        let set = BoxSumSet::uniform(idx.len(), bounds.p_lo[x], bounds.p_hi[x])?;
        blocks.push(Block { indices: idx, set });
    }
    for y in 0..network.n_sources() {
        let idx = network.source_edges(y).to_vec();
        let w = idx.iter().map(|&e| weights[network.edges()[e].0]).collect();
        let set = BoxSumSet::new(w, bounds.q_lo[y], bounds.q_hi[y], true)?;
        blocks.push(Block { indices: idx, set });
    }
    Ok(blocks)
}

/// Largest distance from `plan` to any single constraint of the polytope.
pub fn max_violation(plan: &Plan, network: &Network, bounds: &Bounds, weights: &[f64]) -> f64 {
    match feasible_blocks(network, bounds, weights) {
        Ok(blocks) => max_block_violation(plan.values(), &blocks),
        Err(_) => f64::INFINITY,
    }
}

/// Euclidean projection of `plan` onto the transport polytope with per-type
/// source weights `weights[x]` (`P_t(x) N`, or the empirical estimate).
pub fn project_feasible_plan(
    plan: &Plan,
    network: &Network,
    bounds: &Bounds,
    weights: &[f64],
) -> Result<(Plan, ProjectionReport)> {
    project_feasible_plan_with(plan, network, bounds, weights, &DykstraOptions::default())
}

pub fn project_feasible_plan_with(
    plan: &Plan,
    network: &Network,
    bounds: &Bounds,
    weights: &[f64],
    opts: &DykstraOptions,
) -> Result<(Plan, ProjectionReport)> {
    if plan.len() != network.n_edges() {
        return Err(Error::DimensionMismatch {
            expected: network.n_edges(),
            got: plan.len(),
        });
    }
    let blocks = feasible_blocks(network, bounds, weights)?;
    let (x, report) = dykstra(plan.values(), &blocks, opts)?;
    Ok((Plan::from_values(network, x)?, report))
}

/// Replaces the rows of type `x` in `plan` with `local_rows` (ordered by source).
pub fn merge_local(plan: &Plan, network: &Network, local_rows: &[f64], x: usize) -> Result<Plan> {
    let edges = network.type_edges(x);
    if local_rows.len() != edges.len() {
        return Err(Error::RowMismatch(x));
    }
    let mut out = plan.clone();
    for (&e, &v) in edges.iter().zip(local_rows) {
        out[e] = v;
    }
    Ok(out)
}
