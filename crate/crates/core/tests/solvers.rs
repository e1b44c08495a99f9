mod support;

use popot::admm::{admm_solve, source_update, target_update, AdmmConfig, AdmmState};
use popot::fedlearn::{fl_run, fl_run_from, rescale_plan, FlOptions, StepSchedule};
use popot::oracle::{
    brute_force_solve, lemma1_check, nearest_optimal_plan, projected_gradient_solve, regularity_ratio, theorem1_report,
    TheoryParams,
};
use popot::projection::{Block, BoxSumSet};
use popot::{Bounds, EdgeUtility, Instance, Network, Plan, TypeDistribution, UtilityModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{benchmark, random_tiny_instance};

/// Minimizer of `f` over the feasible grid points: a 1e-2 pass over the box,
/// then a 1e-4 pass within 0.02 of the coarse winner.
fn grid_minimize(dim: usize, top: f64, f: &dyn Fn(&[f64]) -> f64, feasible: &dyn Fn(&[f64]) -> bool) -> Vec<f64> {
    fn search(
        lo: &[f64],
        hi: &[f64],
        step: f64,
        f: &dyn Fn(&[f64]) -> f64,
        feasible: &dyn Fn(&[f64]) -> bool,
    ) -> Vec<f64> {
        let dim = lo.len();
        let counts: Vec<usize> = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| ((b - a) / step).round() as usize + 1)
            .collect();
        let mut idx = vec![0usize; dim];
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut point = vec![0.0; dim];
        'outer: loop {
            for d in 0..dim {
                point[d] = ((lo[d] / step).round() + idx[d] as f64) * step;
            }
            if feasible(&point) {
                let v = f(&point);
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, point.clone()));
                }
            }
            for d in 0..dim {
                idx[d] += 1;
                if idx[d] < counts[d] {
                    continue 'outer;
                }
                idx[d] = 0;
            }
            break;
        }
        best.expect("some grid point is feasible").1
    }
    let coarse = search(&vec![0.0; dim], &vec![top; dim], 1e-2, f, feasible);
    let lo: Vec<f64> = coarse.iter().map(|c| (c - 0.02).max(0.0)).collect();
    let hi: Vec<f64> = coarse.iter().map(|c| c + 0.02).collect();
    search(&lo, &hi, 1e-4, f, feasible)
}

#[test]
fn target_update_with_binding_cap_matches_grid() {
    let inst = benchmark([0.5, 0.3, 0.2]);
    let mut state = AdmmState::new(&inst, 1.0);
    let edges = inst.network.type_edges(0).to_vec();
    for &e in &edges {
        state.plan[e] = 1.0;
    }
    let rows = target_update(&state, &inst, 0).unwrap();

    let p = 0.5;
    let delta = [2.0, 4.0];
    let objective = |v: &[f64]| -> f64 { (0..2).map(|i| -delta[i] * p * v[i] + 0.5 * (v[i] - 1.0).powi(2)).sum() };
    let feasible = |v: &[f64]| v[0] + v[1] <= 2.0 + 1e-9;
    let grid = grid_minimize(2, 2.0, &objective, &feasible);
    for (a, b) in rows.iter().zip(&grid) {
        assert!((a - b).abs() <= 1e-6, "{rows:?} vs {grid:?}");
    }
    assert!((rows[0] - 0.5).abs() < 1e-12 && (rows[1] - 1.5).abs() < 1e-12);
}

#[test]
fn source_update_with_binding_cap_matches_grid() {
    let inst = benchmark([0.5, 0.3, 0.2]);
    let mut state = AdmmState::new(&inst, 1.0);
    let edges = inst.network.source_edges(1).to_vec();
    let alpha = [-0.5, -0.16, -0.44];
    for (&e, a) in edges.iter().zip(alpha) {
        state.alpha[e] = a;
    }
    let rows = source_update(&state, &inst, 1).unwrap();

    let prob = [0.5, 0.3, 0.2];
    let gamma = [2.0, 2.0, 4.0];
    let w = [4000.0, 2400.0, 1600.0];
    let objective = |v: &[f64]| -> f64 {
        (0..3)
            .map(|i| -gamma[i] * prob[i] * v[i] - alpha[i] * v[i] + 0.5 * v[i] * v[i])
            .sum()
    };
    let feasible = |v: &[f64]| (0..3).map(|i| w[i] * v[i]).sum::<f64>() <= 1200.0 + 1e-9;
    let grid = grid_minimize(3, 0.6, &objective, &feasible);
    for (a, b) in rows.iter().zip(&grid) {
        assert!((a - b).abs() <= 1e-6, "{rows:?} vs {grid:?}");
    }
}

#[test]
fn admm_on_benchmark_matches_projected_gradient() {
    let inst = benchmark([0.5, 0.3, 0.2]);
    let sol = admm_solve(&inst, &AdmmConfig::default()).unwrap();
    let pg = projected_gradient_solve(&inst, 20_000, 0.5).unwrap();
    assert!(sol.converged);
    assert!((sol.objective - pg.objective).abs() <= 1e-3 * pg.objective.abs());
}

#[test]
fn brute_force_and_gradient_oracles_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..25 {
        let inst = random_tiny_instance(&mut rng);
        let (_, f_bf) = brute_force_solve(&inst, 0.125).unwrap();
        let pg = projected_gradient_solve(&inst, 20_000, 0.5).unwrap();
        assert!(
            (pg.objective - f_bf).abs() <= 1e-4 * f_bf.abs() + 1e-9,
            "pg {} vs brute force {}",
            pg.objective,
            f_bf
        );
    }
}

fn one_edge(c: f64, p_hi: f64, q_hi: f64, population: u64) -> Instance {
    let net = Network::complete(1, 1).unwrap();
    let u = UtilityModel::linear(&net, &[vec![c]], &[vec![0.0]]).unwrap();
    let b = Bounds::upper(vec![p_hi], vec![q_hi]).unwrap();
    let d = TypeDistribution::new(vec![1.0], population).unwrap();
    Instance::new(net, u, b, d).unwrap()
}

#[test]
fn rescaling_recovers_plan_for_true_population() {
    // per-node plan is capped by the source: q_hi / N = 2 with the true N
    let inst = one_edge(5.0, 10.0, 20.0, 10);
    let mut opts = FlOptions::new(StepSchedule::Constant { mu: 0.5 }, 200, 1);
    let truth = fl_run(&inst, &opts).unwrap().plan;
    opts.population_estimate = Some(20.0);
    let learned = fl_run(&inst, &opts).unwrap().plan;
    assert!((truth[0] - 2.0).abs() < 1e-12);
    assert!((learned[0] - 1.0).abs() < 1e-12);
    let rescaled = rescale_plan(&learned, 10.0, 20.0).unwrap();
    assert!(rescaled.max_abs_diff(&truth) < 1e-12);
}

#[test]
fn zero_utilities_keep_zero_plan() {
    let net = Network::complete(2, 2).unwrap();
    let u = UtilityModel::linear(&net, &vec![vec![0.0; 2]; 2], &vec![vec![0.0; 2]; 2]).unwrap();
    let b = Bounds::upper(vec![1.0, 1.0], vec![5.0, 5.0]).unwrap();
    let d = TypeDistribution::new(vec![0.4, 0.6], 10).unwrap();
    let inst = Instance::new(net, u, b, d).unwrap();
    let run = fl_run(&inst, &FlOptions::new(StepSchedule::InverseSqrt { scale: 0.5 }, 50, 3)).unwrap();
    assert!(run
        .trace
        .iter()
        .all(|r| r.objective == 0.0 && r.plan.iter().all(|&v| v == 0.0)));
    let sol = admm_solve(&inst, &AdmmConfig::default()).unwrap();
    assert_eq!(sol.objective, 0.0);
}

#[test]
fn shift_changes_sampling_but_keeps_counts() {
    let inst = benchmark([0.5, 0.3, 0.2]);
    let mut opts = FlOptions::new(StepSchedule::InverseSqrt { scale: 0.5 }, 400, 9);
    opts.track_feasibility = false;
    let plain = fl_run(&inst, &opts).unwrap();
    opts.shifts.push(popot::ShiftEvent {
        at_iteration: 200,
        distribution: TypeDistribution::new(vec![0.12, 0.65, 0.23], 8000).unwrap(),
    });
    let shifted = fl_run(&inst, &opts).unwrap();
    // identical up to and including the shift iteration
    for (a, b) in plain.trace[..200].iter().zip(&shifted.trace[..200]) {
        assert_eq!(
            (a.sampled_type, &a.plan, a.objective),
            (b.sampled_type, &b.plan, b.objective)
        );
    }
    assert_eq!(shifted.state.counter.total(), 400);
    assert_eq!(shifted.final_distribution.prob(), &[0.12, 0.65, 0.23]);
    // objective after the shift is reported under the new distribution
    let new_inst = inst.with_distribution(shifted.final_distribution.clone()).unwrap();
    let last = shifted.trace.last().unwrap();
    let plan = Plan::from_values(&inst.network, last.plan.clone()).unwrap();
    assert_eq!(last.objective, new_inst.objective(&plan));
}

#[test]
fn objective_trend_improves_over_seeds() {
    let inst = benchmark([0.5, 0.3, 0.2]);
    let iterations = 2000;
    let window = iterations / 20;
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..20 {
        let mut opts = FlOptions::new(StepSchedule::InverseSqrt { scale: 0.5 }, iterations, seed);
        opts.track_feasibility = false;
        let run = fl_run(&inst, &opts).unwrap();
        first += run.trace[..window].iter().map(|r| r.objective).sum::<f64>();
        last += run.trace[iterations - window..]
            .iter()
            .map(|r| r.objective)
            .sum::<f64>();
    }
    assert!(last > first, "late mean {last} not above early mean {first}");
}

#[test]
fn lemma1_holds_for_every_family() {
    let net = Network::complete(2, 2).unwrap();
    let coeffs = [[1.0, 2.0], [0.5, 3.0]];
    for family in [popot::Family::Linear, popot::Family::Log, popot::Family::Sqrt] {
        let rows: Vec<Vec<f64>> = coeffs.iter().map(|r| r.to_vec()).collect();
        let u = UtilityModel::from_family(&net, family, &rows, &rows).unwrap();
        let b = Bounds::upper(vec![2.0, 3.0], vec![10.0, 10.0]).unwrap();
        let d = TypeDistribution::new(vec![0.3, 0.7], 10).unwrap();
        let inst = Instance::new(net.clone(), u, b, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for x in 0..2 {
            let r = lemma1_check(&inst, x, 0.4, 100, &mut rng).unwrap();
            assert!(r.max_fd_deviation <= 1e-4, "{family:?}: {r:?}");
        }
    }
}

#[test]
fn regularity_ratio_on_nested_sets_matches_grid() {
    // X = {v >= 0, v0 + v1 <= 1, v0 <= 0.2}; the single constraints are looser
    let a = Block {
        indices: vec![0, 1],
        set: BoxSumSet::uniform(2, 0.0, 1.0).unwrap(),
    };
    let b = Block {
        indices: vec![0],
        set: BoxSumSet::uniform(1, 0.0, 0.2).unwrap(),
    };
    let point = [2.0, 2.0];
    let ratio = regularity_ratio(&point, &[a, b]).unwrap().unwrap();

    let step = 1e-3;
    let n = (3.0 / step) as usize;
    let dist2 = |keep: &dyn Fn(f64, f64) -> bool| -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let (u, v) = (i as f64 * step, j as f64 * step);
                if keep(u, v) {
                    best = best.min((u - point[0]).powi(2) + (v - point[1]).powi(2));
                }
            }
        }
        best
    };
    let eps = 1e-9;
    let to_x = dist2(&|u, v| u + v <= 1.0 + eps && u <= 0.2 + eps);
    let to_a = dist2(&|u, v| u + v <= 1.0 + eps);
    let to_b = dist2(&|u, _| u <= 0.2 + eps);
    let grid_ratio = to_x / (0.5 * (to_a + to_b));
    assert!(ratio > 1.0);
    assert!((ratio - grid_ratio).abs() < 1e-6, "{ratio} vs {grid_ratio}");
}

#[test]
fn bound_report_from_the_optimum() {
    let inst = one_edge(3.0, 2.0, 100.0, 4);
    let optimum = Plan::from_values(&inst.network, vec![2.0]).unwrap();
    let mut opts = FlOptions::new(StepSchedule::Constant { mu: 0.1 }, 1, 0);
    opts.checkpoint_every = 1;
    let ensemble: Vec<_> = (0..20)
        .map(|s| {
            opts.seed = s;
            fl_run_from(&inst, &opts, optimum.clone()).unwrap().checkpoints
        })
        .collect();
    let params = TheoryParams {
        xi: 1.0,
        l_sum: 3.0,
        r0: 0.0,
        f_star: 6.0,
    };
    let report = theorem1_report(&inst, &ensemble, &params).unwrap();
    assert_eq!(report.len(), 1);
    let r = &report[0];
    assert_eq!(r.k, 1);
    assert_eq!(r.gap_per_capita, 0.0);
    assert_eq!(r.dist2, 0.0);
    // with r0 = 0 the upper bound is mu_hat1 * L / 2
    assert!((r.bounds.upper - 0.1 * 3.0 / 2.0).abs() < 1e-15);
    assert!(r.violations.is_empty());
}

#[test]
fn bound_report_zero_utilities() {
    let inst = one_edge(0.0, 2.0, 100.0, 4);
    let mut opts = FlOptions::new(StepSchedule::Constant { mu: 0.1 }, 10, 0);
    opts.checkpoint_every = 5;
    let ensemble = vec![fl_run(&inst, &opts).unwrap().checkpoints];
    let params = TheoryParams {
        xi: 1.0,
        l_sum: 1.0,
        r0: 0.0,
        f_star: 0.0,
    };
    for r in theorem1_report(&inst, &ensemble, &params).unwrap() {
        assert_eq!(r.gap_per_capita, 0.0);
        assert!(r.bounds.upper >= 0.0 && r.bounds.feasibility >= 0.0);
    }
}

#[test]
fn nearest_optimal_plan_on_benchmark() {
    let inst = benchmark([0.5, 0.3, 0.2]);
    let zero = Plan::zeros(&inst.network);
    let q = nearest_optimal_plan(&inst, &zero, 15600.0 * (1.0 - 1e-9)).unwrap();
    assert!((inst.objective(&q) - 15600.0).abs() < 1e-3);
    // pi_32 is pinned by the second source, type 1 receives nothing
    let e32 = inst.network.edge(2, 1).unwrap();
    assert!((q[e32] - 0.75).abs() < 1e-6);
    assert!(q.row(&inst.network, 0).iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn log_utilities_reach_the_same_optimum() {
    let net = Network::complete(1, 2).unwrap();
    let t = vec![EdgeUtility::Log(2.0), EdgeUtility::Log(1.0)];
    let s = vec![EdgeUtility::Linear(0.0), EdgeUtility::Linear(0.0)];
    let u = UtilityModel::new(&net, t, s).unwrap();
    let b = Bounds::upper(vec![3.0], vec![10.0, 10.0]).unwrap();
    let d = TypeDistribution::new(vec![1.0], 2).unwrap();
    let inst = Instance::new(net, u, b, d).unwrap();
    let admm = admm_solve(&inst, &AdmmConfig::default()).unwrap();
    let pg = projected_gradient_solve(&inst, 20_000, 0.5).unwrap();
    let (_, grid) = brute_force_solve(&inst, 1e-3).unwrap();
    // 2 / (1 + a) = 1 / (1 + b), a + b = 3  =>  a = 7/3
    assert!((admm.plan[0] - 7.0 / 3.0).abs() < 1e-5);
    assert!((admm.objective - pg.objective).abs() <= 1e-6 * pg.objective);
    assert!(grid <= pg.objective + 1e-9 && pg.objective - grid < 1e-5);
}
