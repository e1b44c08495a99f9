mod support;

use popot::projection::{max_violation, project_feasible_plan, BoxSumSet};
use popot::{Bounds, Network, Plan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{active_set_projection, benchmark, polytope_rows, random_tiny_instance};

#[test]
fn benchmark_plans_match_active_set_enumeration() {
    let inst = benchmark([0.5, 0.3, 0.2]);
    let counts = inst.counts();
    let rows = polytope_rows(&inst.network, &inst.bounds, &counts);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut infeasible = 0;
    for _ in 0..10 {
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let plan = Plan::from_values(&inst.network, v.clone()).unwrap();
        if max_violation(&plan, &inst.network, &inst.bounds, &counts) > 0.0 {
            infeasible += 1;
        }
        let (p, report) = project_feasible_plan(&plan, &inst.network, &inst.bounds, &counts).unwrap();
        assert!(report.converged);
        let oracle = active_set_projection(&v, &rows);
        for (a, b) in p.values().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6, "{:?} vs {:?}", p.values(), oracle);
        }
    }
    assert!(infeasible >= 5);
}

#[test]
fn tiny_instances_match_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let inst = random_tiny_instance(&mut rng);
        let counts = inst.counts();
        let rows = polytope_rows(&inst.network, &inst.bounds, &counts);
        let v: Vec<f64> = (0..inst.network.n_edges()).map(|_| rng.gen_range(-2.0..6.0)).collect();
        let plan = Plan::from_values(&inst.network, v.clone()).unwrap();
        let (p, _) = project_feasible_plan(&plan, &inst.network, &inst.bounds, &counts).unwrap();
        let oracle = active_set_projection(&v, &rows);
        for (a, b) in p.values().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6, "{:?} vs {:?}", p.values(), oracle);
        }
    }
}

#[test]
fn lower_bounds_match_active_set_enumeration() {
    let net = Network::complete(2, 2).unwrap();
    let bounds = Bounds::new(vec![1.0, 0.5], vec![2.0, 3.0], vec![2.0, 0.0], vec![6.0, 5.0]).unwrap();
    let weights = [2.0, 1.0];
    let rows = polytope_rows(&net, &bounds, &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..4.0)).collect();
        let plan = Plan::from_values(&net, v.clone()).unwrap();
        let (p, _) = project_feasible_plan(&plan, &net, &bounds, &weights).unwrap();
        let oracle = active_set_projection(&v, &rows);
        for (a, b) in p.values().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn box_sum_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = rng.gen_range(1..=5);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let lo = rng.gen_range(0.0..2.0);
        let hi = lo + rng.gen_range(0.0..3.0);
        let set = BoxSumSet::new(w.clone(), lo, hi, true).unwrap();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p = set.project(&v).unwrap();
        let oracle = active_set_projection(&v, &[(w, lo, hi)]);
        for (a, b) in p.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9, "{p:?} vs {oracle:?}");
        }
    }
}
