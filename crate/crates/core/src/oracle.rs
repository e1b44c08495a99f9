//! Centralized reference solvers and numerical checks of the convergence
//! theory for the federated solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedlearn::{local_prox_update, Checkpoint};
use crate::network::{feasibility_residual, Plan};
use crate::projection::{
    dykstra, feasible_blocks, max_violation, merge_local, project_feasible_plan, Block, BoxSumSet, DykstraOptions,
};
use crate::utility::{local_cost, subgradient_local_cost, Instance};

pub const BRUTE_FORCE_MAX_EDGES: usize = 4;
/// Feasibility slack accepted by the grid search, relative to each bound.
const GRID_FEAS_TOL: f64 = 1e-9;

/// Exhaustive grid search over the feasible plans of a tiny instance.
///
/// Each edge ranges over `[0, min(p_hi[x], q_hi[y] / count(x))]` in steps of
/// `grid_step`, with the upper end always included. Returns the best feasible
/// grid point and its objective.
pub fn brute_force_solve(instance: &Instance, grid_step: f64) -> Result<(Plan, f64)> {
    let net = &instance.network;
    let n = net.n_edges();
    if n > BRUTE_FORCE_MAX_EDGES {
        return Err(Error::TooLarge {
            edges: n,
            limit: BRUTE_FORCE_MAX_EDGES,
        });
    }
    if !(grid_step > 0.0 && grid_step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "grid step must be positive, got {grid_step}"
        )));
    }
    let b = &instance.bounds;
    let counts = instance.counts();
    let axes: Vec<Vec<f64>> = net
        .edges()
        .iter()
        .map(|&(x, y)| {
            let top = b.p_hi[x].min(b.q_hi[y] / counts[x]);
            let steps = (top / grid_step + 1e-9).floor() as usize;
            let mut axis: Vec<f64> = (0..=steps).map(|i| i as f64 * grid_step).collect();
            if top - axis[steps] > 1e-12 * top.max(1.0) {
                axis.push(top);
            }
            axis
        })
        .collect();

    let feasible = |v: &[f64]| {
        let mut rows = vec![0.0; net.n_types()];
        let mut cols = vec![0.0; net.n_sources()];
        for (e, &(x, y)) in net.edges().iter().enumerate() {
            rows[x] += v[e];
            cols[y] += v[e] * counts[x];
        }
        let ok =
            |s: f64, lo: f64, hi: f64| s >= lo - GRID_FEAS_TOL * lo.max(1.0) && s <= hi + GRID_FEAS_TOL * hi.max(1.0);
        (0..net.n_types()).all(|x| ok(rows[x], b.p_lo[x], b.p_hi[x]))
            && (0..net.n_sources()).all(|y| ok(cols[y], b.q_lo[y], b.q_hi[y]))
    };
    let value = |v: &[f64]| -> f64 {
        net.edges()
            .iter()
            .enumerate()
            .map(|(e, &(x, _))| instance.utility.edge_value(e, v[e]) * counts[x])
            .sum()
    };

    let mut idx = vec![0usize; n];
    let mut point: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    loop {
        if feasible(&point) {
            let f = value(&point);
            if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
                best = Some((point.clone(), f));
            }
        }
        // odometer increment
        let mut d = 0;
        loop {
            if d == n {
                let (v, f) = best.ok_or_else(|| Error::Infeasible("no grid point satisfies the bounds".into()))?;
                return Ok((Plan::from_values(net, v)?, f));
            }
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                point[d] = axes[d][idx[d]];
                break;
            }
            idx[d] = 0;
            point[d] = axes[d][0];
            d += 1;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientSolution {
    pub plan: Plan,
    pub objective: f64,
    pub iterations: usize,
    /// `||pi - Proj(pi + rate * grad)|| / rate` at the returned plan.
    pub gradient_mapping_norm: f64,
}

/// Projected gradient ascent on the per-capita objective, started from the
/// projection of the zero plan.
pub fn projected_gradient_solve(instance: &Instance, steps: usize, rate: f64) -> Result<GradientSolution> {
    projected_gradient_solve_from(instance, &Plan::zeros(&instance.network), steps, rate)
}

pub fn projected_gradient_solve_from(
    instance: &Instance,
    start: &Plan,
    steps: usize,
    rate: f64,
) -> Result<GradientSolution> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("rate must be positive, got {rate}")));
    }
    let net = &instance.network;
    let counts = instance.counts();
    let prob = instance.dist.prob();
    let project = |p: &Plan| -> Result<Plan> { Ok(project_feasible_plan(p, net, &instance.bounds, &counts)?.0) };
    let ascent = |p: &Plan| -> Result<Plan> {
        let mut next = p.clone();
        for (e, &(x, _)) in net.edges().iter().enumerate() {
            let g = prob[x] * instance.utility.edge_derivative(e, p[e]);
            if !g.is_finite() {
                return Err(Error::NonDifferentiable { at: p[e] });
            }
            next[e] += rate * g;
        }
        project(&next)
    };

    let mut plan = project(start)?;
    let mut best = (plan.clone(), instance.objective(&plan));
    let mut mapping = f64::INFINITY;
    let mut iterations = 0;
    for k in 1..=steps {
        let next = ascent(&plan)?;
        mapping = plan.distance(&next) / rate;
        iterations = k;
        plan = next;
        let f = instance.objective(&plan);
        if f > best.1 {
            best = (plan.clone(), f);
        }
        if mapping <= 1e-12 * plan.norm().max(1.0) {
            break;
        }
    }
    let (plan, objective) = best;
    if steps > 0 {
        mapping = plan.distance(&ascent(&plan)?) / rate;
    }
    Ok(GradientSolution {
        plan,
        objective,
        iterations,
        gradient_mapping_norm: mapping,
    })
}

/// Nearest point to `point` among the feasible plans whose objective is at
/// least `target` (linear utilities only).
///
/// Useful when the optimum is not unique: plans are compared with the
/// closest optimal plan rather than an arbitrary one.
pub fn nearest_optimal_plan(instance: &Instance, point: &Plan, target: f64) -> Result<Plan> {
    let net = &instance.network;
    let counts = instance.counts();
    let mut weights = Vec::with_capacity(net.n_edges());
    for (e, &(x, _)) in net.edges().iter().enumerate() {
        let c = instance
            .utility
            .edge_linear_coefficient(e)
            .ok_or_else(|| Error::InvalidUtility("nearest optimal plan needs linear utilities".into()))?;
        weights.push(c * counts[x]);
    }
    let mut blocks = feasible_blocks(net, &instance.bounds, &counts)?;
    blocks.push(Block {
        indices: (0..net.n_edges()).collect(),
        set: BoxSumSet::new(weights, target, f64::INFINITY, true)?,
    });
    let (v, _) = dykstra(point.values(), &blocks, &DykstraOptions::default())?;
    Plan::from_values(net, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub points: usize,
    /// Largest `||grad f_mu|| - ||grad f||` seen (nonpositive when the
    /// inequality holds).
    pub max_excess: f64,
    /// Largest deviation between the envelope gradient identity and central
    /// finite differences.
    pub max_fd_deviation: f64,
}

pub const LEMMA1_FD_STEP: f64 = 1e-5;
pub const LEMMA1_FD_TOL: f64 = 1e-4;
pub const LEMMA1_NORM_TOL: f64 = 1e-6;

/// Moreau envelope of the local cost of type `x` at `plan`.
pub fn envelope_value(instance: &Instance, plan: &Plan, x: usize, mu: f64) -> Result<f64> {
    let net = &instance.network;
    let rows = local_prox_update(plan, net, &instance.utility, x, mu)?;
    let z = merge_local(plan, net, &rows, x)?;
    let d = z.distance(plan);
    Ok(local_cost(&z, net, &instance.utility, x) + d * d / (2.0 * mu))
}

/// `(plan - prox(plan)) / mu`
pub fn envelope_gradient(instance: &Instance, plan: &Plan, x: usize, mu: f64) -> Result<Vec<f64>> {
    let net = &instance.network;
    let rows = local_prox_update(plan, net, &instance.utility, x, mu)?;
    let z = merge_local(plan, net, &rows, x)?;
    Ok(plan
        .values()
        .iter()
        .zip(z.values())
        .map(|(p, q)| (p - q) / mu)
        .collect())
}

/// Checks that the envelope gradient never exceeds the cost gradient in norm
/// at `trials` random plans, and that the gradient identity agrees with
/// finite differences of the envelope.
///
/// Random plans have entries uniform in `[0.01 t, t)` with `t = 2 max(p_hi)`,
/// away from the kink of utilities like the square root at zero.
pub fn lemma1_check<R: Rng + ?Sized>(
    instance: &Instance,
    x: usize,
    mu: f64,
    trials: usize,
    rng: &mut R,
) -> Result<Lemma1Report> {
    if x >= instance.network.n_types() {
        return Err(Error::InvalidParameter(format!("type index {x} out of range")));
    }
    let net = &instance.network;
    let top = 2.0 * instance.bounds.p_hi.iter().cloned().fold(1.0, f64::max);
    let mut report = Lemma1Report {
        points: 0,
        max_excess: f64::NEG_INFINITY,
        max_fd_deviation: 0.0,
    };
    let mut failures = Vec::new();
    for t in 0..trials {
        let values: Vec<f64> = (0..net.n_edges()).map(|_| rng.gen_range(0.01 * top..top)).collect();
        let plan = Plan::from_values(net, values)?;
        let grad_env = envelope_gradient(instance, &plan, x, mu)?;
        let grad_cost = subgradient_local_cost(&plan, net, &instance.utility, x)?;
        let norm_env = grad_env.iter().map(|g| g * g).sum::<f64>().sqrt();
        let norm_cost = grad_cost.iter().map(|g| g * g).sum::<f64>().sqrt();

        let mut fd_dev = 0.0_f64;
        for e in 0..net.n_edges() {
            let mut up = plan.clone();
            let mut down = plan.clone();
            up[e] += LEMMA1_FD_STEP;
            down[e] -= LEMMA1_FD_STEP;
            let fd = (envelope_value(instance, &up, x, mu)? - envelope_value(instance, &down, x, mu)?)
                / (2.0 * LEMMA1_FD_STEP);
            fd_dev = fd_dev.max((fd - grad_env[e]).abs());
        }

        report.points += 1;
        report.max_excess = report.max_excess.max(norm_env - norm_cost);
        report.max_fd_deviation = report.max_fd_deviation.max(fd_dev);
        if norm_env > norm_cost + LEMMA1_NORM_TOL {
            failures.push(format!(
                "point {t}: envelope gradient {norm_env} > cost gradient {norm_cost}"
            ));
        }
        if fd_dev > LEMMA1_FD_TOL {
            failures.push(format!("point {t}: finite-difference deviation {fd_dev:.3e}"));
        }
    }
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(Error::CheckFailed(failures))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiEstimate {
    pub xi: f64,
    /// Sample points that lay outside the intersection and entered the ratio.
    pub used: usize,
}

/// Ratio `dist^2(v, intersection) / mean_b dist^2(v, block b)`, or `None` when
/// `v` already lies in the intersection.
pub fn regularity_ratio(point: &[f64], blocks: &[Block]) -> Result<Option<f64>> {
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let (proj, _) = dykstra(point, blocks, &DykstraOptions::default())?;
    let num = dist2(point, &proj);
    if num <= 1e-18 {
        return Ok(None);
    }
    let mut den = 0.0;
    for b in blocks {
        den += dist2(point, &b.project(point)?);
    }
    den /= blocks.len() as f64;
    Ok(Some(num / den))
}

/// Empirical linear-regularity constant of the intersection of `blocks`,
/// sampling points uniformly in the box `[0, top)^dim`. Never below 1, which
/// holds for any intersection.
pub fn estimate_xi_blocks<R: Rng + ?Sized>(
    blocks: &[Block],
    dim: usize,
    top: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<XiEstimate> {
    if samples == 0 || blocks.is_empty() {
        return Err(Error::InvalidParameter("need at least one sample and one block".into()));
    }
    if top.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: top.len(),
        });
    }
    let mut est = XiEstimate { xi: 1.0, used: 0 };
    for _ in 0..samples {
        let v: Vec<f64> = top.iter().map(|&t| rng.gen_range(0.0..t)).collect();
        if let Some(r) = regularity_ratio(&v, blocks)? {
            est.xi = est.xi.max(r);
            est.used += 1;
        }
    }
    Ok(est)
}

/// Linear-regularity estimate for the feasible polytope of `instance`, with
/// each edge sampled in `[0, 2 p_hi[x])`.
pub fn estimate_xi<R: Rng + ?Sized>(instance: &Instance, samples: usize, rng: &mut R) -> Result<XiEstimate> {
    let net = &instance.network;
    let blocks = feasible_blocks(net, &instance.bounds, &instance.counts())?;
    let top: Vec<f64> = net
        .edges()
        .iter()
        .map(|&(x, _)| 2.0 * instance.bounds.p_hi[x].max(1e-6))
        .collect();
    estimate_xi_blocks(&blocks, net.n_edges(), &top, samples, rng)
}

/// [`estimate_xi`] with its own seeded generator.
pub fn estimate_xi_seeded(instance: &Instance, samples: usize, seed: u64) -> Result<XiEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    estimate_xi(instance, samples, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub xi: f64,
    /// Combined Lipschitz constant of the source and target utilities.
    pub l_sum: f64,
    /// Distance from the starting plan to the optimum.
    pub r0: f64,
    /// Optimal objective divided by the population.
    pub f_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub r_k: f64,
    pub upper: f64,
    /// Upper bound with the step-size sum in place of the squared sum.
    pub upper_mu1: f64,
    pub lower: f64,
    pub feasibility: f64,
}

/// Suboptimality and feasibility bounds after `k` steps with step-size sums
/// `mu_hat1 = sum mu_i`, `mu_hat2 = sum mu_i^2`:
///
/// - `R_k = mu_hat1 xi (r0^2 + k L mu_hat2)`
/// - upper `R_k / (2 k xi mu_hat2)` (and the `mu_hat1` variant)
/// - lower `-3 xi L mu_hat1 - L sqrt(R_k / (k mu_hat1))`
/// - feasibility `2 xi^2 L^2 (3 mu_hat1)^2 + 2 R_k / (k mu_hat1)`
pub fn theorem1_bounds(k: usize, mu_hat1: f64, mu_hat2: f64, p: &TheoryParams) -> BoundTerms {
    let kf = k as f64;
    let l = p.l_sum;
    let r_k = mu_hat1 * p.xi * (p.r0 * p.r0 + kf * l * mu_hat2);
    BoundTerms {
        r_k,
        upper: r_k / (2.0 * kf * p.xi * mu_hat2),
        upper_mu1: r_k / (2.0 * kf * p.xi * mu_hat1),
        lower: -3.0 * p.xi * l * mu_hat1 - l * (r_k / (kf * mu_hat1)).sqrt(),
        feasibility: 2.0 * p.xi * p.xi * l * l * (3.0 * mu_hat1).powi(2) + 2.0 * r_k / (kf * mu_hat1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub k: usize,
    pub mu_hat1: f64,
    pub mu_hat2: f64,
    pub bounds: BoundTerms,
    /// Ensemble mean of `F(avg plan) - F*` with `F` the negated objective
    /// divided by the population.
    pub gap_per_capita: f64,
    /// The same gap on the population-weighted objective.
    pub gap_total: f64,
    /// Ensemble mean of the squared distance from the averaged plan to the
    /// feasible set.
    pub dist2: f64,
    pub runs: usize,
    pub violations: Vec<String>,
}

/// Compares ensemble means of the averaged plans against the bounds, one
/// report per checkpoint. All runs must share the same checkpoint schedule.
pub fn theorem1_report(
    instance: &Instance,
    ensemble: &[Vec<Checkpoint>],
    params: &TheoryParams,
) -> Result<Vec<BoundReport>> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty ensemble".into()))?;
    let n = instance.dist.population() as f64;
    let runs = ensemble.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (i, cp) in first.iter().enumerate() {
        let mut gap = 0.0;
        let mut dist2 = 0.0;
        for run in ensemble {
            let c = run
                .get(i)
                .filter(|c| c.k == cp.k)
                .ok_or_else(|| Error::InvalidParameter(format!("runs disagree on checkpoint {}", cp.k)))?;
            gap += params.f_star - instance.objective(&c.averaged) / n;
            let d = feasibility_residual(&c.averaged, &instance.network, &instance.bounds, &instance.dist)?;
            dist2 += d * d;
        }
        gap /= runs;
        dist2 /= runs;
        let bounds = theorem1_bounds(cp.k, cp.mu_hat1, cp.mu_hat2, params);
        let mut violations = Vec::new();
        if gap > bounds.upper {
            violations.push(format!("gap {gap:.6e} above upper bound {:.6e}", bounds.upper));
        }
        if gap < bounds.lower {
            violations.push(format!("gap {gap:.6e} below lower bound {:.6e}", bounds.lower));
        }
        if dist2 > bounds.feasibility {
            violations.push(format!(
                "squared distance {dist2:.6e} above bound {:.6e}",
                bounds.feasibility
            ));
        }
        out.push(BoundReport {
            k: cp.k,
            mu_hat1: cp.mu_hat1,
            mu_hat2: cp.mu_hat2,
            bounds,
            gap_per_capita: gap,
            gap_total: gap * n,
            dist2,
            runs: ensemble.len(),
            violations,
        });
    }
    Ok(out)
}

/// Largest constraint violation of `plan` under the true distribution.
pub fn true_violation(instance: &Instance, plan: &Plan) -> f64 {
    max_violation(plan, &instance.network, &instance.bounds, &instance.counts())
}
