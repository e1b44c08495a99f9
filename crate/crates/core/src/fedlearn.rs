//! Federated proximal solver for an unknown type distribution.
//!
//! At every step one target type is revealed by sampling the (hidden) type
//! distribution. The targets of that type take a proximal step on their own
//! unweighted cost, the central planner merges the new rows into the plan and
//! projects onto the polytope built from the empirical type distribution seen
//! so far, scaled by the population estimate.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{feasibility_residual, Network, Plan, TypeDistribution};
use crate::projection::{merge_local, project_feasible_plan};
use crate::scalar::increasing_root;
use crate::utility::{Instance, UtilityModel};

/// Running per-type sample counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmpiricalCounter {
    counts: Vec<u64>,
    total: u64,
}

impl EmpiricalCounter {
    pub fn new(n_types: usize) -> Self {
        Self {
            counts: vec![0; n_types],
            total: 0,
        }
    }

    pub fn record(&mut self, x: usize) {
        self.counts[x] += 1;
        self.total += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Empirical type frequencies; all zero before the first sample.
    pub fn distribution(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.counts.len()];
        }
        let k = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / k).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant {
        mu: f64,
    },
    /// `mu_k = scale / sqrt(k)`, `k = 1, 2, ...`
    InverseSqrt {
        scale: f64,
    },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            StepSchedule::Constant { mu } => mu,
            StepSchedule::InverseSqrt { scale } => scale,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("step size must be positive, got {v}")))
        }
    }

    /// Step size for the `k`-th iteration (1-based).
    pub fn step(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { mu } => mu,
            StepSchedule::InverseSqrt { scale } => scale / (k.max(1) as f64).sqrt(),
        }
    }
}

/// Replaces the sampling distribution once `at_iteration` iterations have run.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftEvent {
    pub at_iteration: usize,
    pub distribution: TypeDistribution,
}

#[derive(Debug, Clone)]
pub struct FlState {
    pub plan: Plan,
    /// Merged local solution of the last step, before projection.
    pub last_local: Plan,
    pub counter: EmpiricalCounter,
    /// Steps taken so far.
    pub k: usize,
    pub mu_hat1: f64,
    pub mu_hat2: f64,
    weighted_sum: Vec<f64>,
    rng: ChaCha8Rng,
}

impl FlState {
    /// Zero plan, empty counter, seeded sampler.
    pub fn new(network: &Network, seed: u64) -> Self {
        Self::with_plan(Plan::zeros(network), network.n_types(), seed)
    }

    pub fn with_plan(plan: Plan, n_types: usize, seed: u64) -> Self {
        Self {
            last_local: plan.clone(),
            weighted_sum: vec![0.0; plan.len()],
            plan,
            counter: EmpiricalCounter::new(n_types),
            k: 0,
            mu_hat1: 0.0,
            mu_hat2: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Step-size weighted average of the plans each step started from.
    pub fn averaged_plan(&self) -> Plan {
        let mut avg = self.plan.clone();
        if self.mu_hat1 > 0.0 {
            for (a, s) in avg.values_mut().iter_mut().zip(&self.weighted_sum) {
                *a = s / self.mu_hat1;
            }
        }
        avg
    }
}

pub fn sample_type<R: rand::Rng + ?Sized>(rng: &mut R, dist: &TypeDistribution) -> usize {
    // probabilities are validated positive at construction
    let index = WeightedIndex::new(dist.prob()).expect("validated distribution");
    index.sample(rng)
}

/// Proximal step of type `x` on its unweighted local cost.
///
/// Returns the new rows of type `x` (ordered by source); all other rows are
/// unaffected by the step.
pub fn local_prox_update(
    plan: &Plan,
    network: &Network,
    utility: &UtilityModel,
    x: usize,
    mu: f64,
) -> Result<Vec<f64>> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    network
        .type_edges(x)
        .iter()
        .map(|&e| {
            let start = plan[e];
            if let Some(c) = utility.edge_linear_coefficient(e) {
                return Ok(start + mu * c);
            }
            // mu * (-u'(p)) + p - start = 0; the root lies at or above start
            increasing_root(
                |p| p - start - mu * utility.edge_derivative(e, p),
                |p| utility.edge_second_derivative(e, p).map(|d2| 1.0 - mu * d2),
                start,
                start + mu * utility.edge_derivative(e, start.max(1e-12)).min(1e12),
            )
        })
        .collect()
}

/// Record of one federated step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub sampled_type: usize,
    pub mu: f64,
}

/// One iteration: sample, local proximal step, merge, project onto the
/// empirical polytope.
pub fn fl_step(
    state: &mut FlState,
    instance: &Instance,
    sampling: &TypeDistribution,
    schedule: &StepSchedule,
    population_estimate: f64,
) -> Result<StepRecord> {
    let net = &instance.network;
    let iteration = state.k + 1;
    let mu = schedule.step(iteration);
    let x = sample_type(&mut state.rng, sampling);

    let rows = local_prox_update(&state.plan, net, &instance.utility, x, mu)?;
    let local = merge_local(&state.plan, net, &rows, x)?;

    state.counter.record(x);
    let weights: Vec<f64> = state
        .counter
        .distribution()
        .iter()
        .map(|p| p * population_estimate)
        .collect();
    let (next, _) = project_feasible_plan(&local, net, &instance.bounds, &weights)?;

    for (acc, v) in state.weighted_sum.iter_mut().zip(state.plan.values()) {
        *acc += mu * v;
    }
    state.mu_hat1 += mu;
    state.mu_hat2 += mu * mu;
    state.last_local = local;
    state.plan = next;
    state.k = iteration;
    Ok(StepRecord {
        iteration,
        sampled_type: x,
        mu,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlOptions {
    pub schedule: StepSchedule,
    pub iterations: usize,
    pub seed: u64,
    pub shifts: Vec<ShiftEvent>,
    /// Population size used in the projection; the true `N` when `None`.
    pub population_estimate: Option<f64>,
    /// Store the averaged plan every this many iterations (0: final only).
    pub checkpoint_every: usize,
    /// Compute the distance to the true feasible set on every trace row.
    pub track_feasibility: bool,
}

impl FlOptions {
    pub fn new(schedule: StepSchedule, iterations: usize, seed: u64) -> Self {
        Self {
            schedule,
            iterations,
            seed,
            shifts: Vec::new(),
            population_estimate: None,
            checkpoint_every: 0,
            track_feasibility: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlTraceRow {
    pub iteration: usize,
    pub sampled_type: usize,
    pub mu: f64,
    /// Centralized objective of the plan under the current true distribution.
    pub objective: f64,
    /// Distance to the current true feasible set (NaN when not tracked).
    pub feasibility_residual: f64,
    pub plan: Vec<f64>,
    /// `sum_y pi_xy` per type.
    pub received: Vec<f64>,
    /// Empirical type frequencies after this iteration's sample.
    pub empirical: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub k: usize,
    pub mu_hat1: f64,
    pub mu_hat2: f64,
    pub averaged: Plan,
}

#[derive(Debug, Clone)]
pub struct FlRun {
    pub plan: Plan,
    pub trace: Vec<FlTraceRow>,
    pub checkpoints: Vec<Checkpoint>,
    pub state: FlState,
    /// Distribution the run ended under (after any shifts).
    pub final_distribution: TypeDistribution,
}

/// Runs `options.iterations` federated steps from the zero plan.
///
/// Shift events only change the sampling distribution; the empirical counter
/// keeps every earlier sample.
pub fn fl_run(instance: &Instance, options: &FlOptions) -> Result<FlRun> {
    fl_run_from(instance, options, Plan::zeros(&instance.network))
}

pub fn fl_run_from(instance: &Instance, options: &FlOptions, start: Plan) -> Result<FlRun> {
    if options.iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be at least 1".into()));
    }
    options.schedule.validate()?;
    let mut shifts = options.shifts.clone();
    if shifts.iter().any(|s| s.at_iteration == 0) {
        return Err(Error::InvalidParameter("shift events need at_iteration >= 1".into()));
    }
    for s in &shifts {
        s.distribution.validate(&instance.network)?;
    }
    shifts.sort_by_key(|s| s.at_iteration);
    let n_est = options.population_estimate.unwrap_or(instance.dist.population() as f64);
    if !(n_est > 0.0 && n_est.is_finite()) {
        return Err(Error::InvalidParameter("population estimate must be positive".into()));
    }

    let mut current = instance.clone();
    let mut state = FlState::with_plan(start, instance.network.n_types(), options.seed);
    let mut trace = Vec::with_capacity(options.iterations);
    let mut checkpoints = Vec::new();
    let mut pending = shifts.iter().peekable();

    for k in 1..=options.iterations {
        while let Some(shift) = pending.next_if(|s| s.at_iteration < k) {
            current = current.with_distribution(shift.distribution.clone())?;
        }
        let record = fl_step(&mut state, &current, &current.dist, &options.schedule, n_est)?;
        let residual = if options.track_feasibility {
            feasibility_residual(&state.plan, &current.network, &current.bounds, &current.dist)?
        } else {
            f64::NAN
        };
        trace.push(FlTraceRow {
            iteration: k,
            sampled_type: record.sampled_type,
            mu: record.mu,
            objective: current.objective(&state.plan),
            feasibility_residual: residual,
            plan: state.plan.values().to_vec(),
            received: state.plan.received(&current.network),
            empirical: state.counter.distribution(),
        });
        let due = options.checkpoint_every > 0 && k % options.checkpoint_every == 0;
        if due || k == options.iterations {
            checkpoints.push(Checkpoint {
                k,
                mu_hat1: state.mu_hat1,
                mu_hat2: state.mu_hat2,
                averaged: state.averaged_plan(),
            });
        }
    }
    Ok(FlRun {
        plan: state.plan.clone(),
        trace,
        checkpoints,
        state,
        final_distribution: current.dist,
    })
}

/// Converts a plan learned with population estimate `n_est` to the true
/// population `n_true`.
///
/// Per-node amounts under a binding source cap scale inversely with the
/// population, so the plan is divided by `n_true / n_est`.
pub fn rescale_plan(plan: &Plan, n_true: f64, n_est: f64) -> Result<Plan> {
    if !(n_true > 0.0 && n_est > 0.0) {
        return Err(Error::InvalidParameter("populations must be positive".into()));
    }
    Ok(plan.scaled(n_est / n_true))
}

/// Constant step size and iteration count that reach accuracy `epsilon`:
///
/// `mu = eps / (L^2 (3 xi + sqrt(2 xi)))`,
/// `K = ceil(L^2 r0^2 / eps^2 * max(1, (3 xi + sqrt(2 xi))^2))`.
pub fn corollary1_parameters(epsilon: f64, xi: f64, l_sum: f64, r0: f64) -> Result<(f64, usize)> {
    for (name, v) in [("epsilon", epsilon), ("xi", xi), ("L_sum", l_sum), ("r0", r0)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    let c = 3.0 * xi + (2.0 * xi).sqrt();
    let mu = epsilon / (l_sum * l_sum * c);
    let k = (l_sum * l_sum * r0 * r0 / (epsilon * epsilon)) * (c * c).max(1.0);
    Ok((mu, k.ceil() as usize))
}
