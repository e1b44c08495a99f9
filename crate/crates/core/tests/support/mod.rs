#![allow(dead_code, clippy::needless_range_loop)]

use popot::{Bounds, Instance, Network, TypeDistribution, UtilityModel};
use rand::Rng;

pub const DELTA: [[f64; 2]; 3] = [[2.0, 4.0], [2.0, 2.0], [4.0, 4.0]];
pub const GAMMA: [[f64; 2]; 3] = [[2.0, 2.0], [3.0, 2.0], [1.0, 4.0]];

/// The three-type, two-source benchmark with linear utilities.
pub fn benchmark(prob: [f64; 3]) -> Instance {
    let net = Network::complete(3, 2).unwrap();
    let d: Vec<Vec<f64>> = DELTA.iter().map(|r| r.to_vec()).collect();
    let g: Vec<Vec<f64>> = GAMMA.iter().map(|r| r.to_vec()).collect();
    let u = UtilityModel::linear(&net, &d, &g).unwrap();
    let b = Bounds::upper(vec![2.0, 3.0, 4.0], vec![1200.0, 1200.0]).unwrap();
    let dist = TypeDistribution::new(prob.to_vec(), 8000).unwrap();
    Instance::new(net, u, b, dist).unwrap()
}

/// Random instance with at most two types, two sources and four edges.
///
/// Counts per type are 1, 2, 4 or 8 and all bounds are integers, so every
/// vertex of the feasible set lies on the 1/8 grid.
pub fn random_tiny_instance<R: Rng>(rng: &mut R) -> Instance {
    let nx = rng.gen_range(1..=2);
    let ny = rng.gen_range(1..=2);
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            edges.push((x + 1, y + 1));
        }
    }
    // drop one edge of a 2x2 network now and then, keeping every node connected
    if nx == 2 && ny == 2 && rng.gen_bool(0.3) {
        let k = rng.gen_range(0..4);
        edges.remove(k);
    }
    let types: Vec<usize> = (1..=nx).collect();
    let sources: Vec<usize> = (1..=ny).collect();
    let net = Network::build(&types, &sources, &edges).unwrap();
    let m = net.n_edges();
    let delta: Vec<f64> = (0..m).map(|_| rng.gen_range(0..=5) as f64).collect();
    let gamma: Vec<f64> = (0..m).map(|_| rng.gen_range(0..=5) as f64).collect();
    let counts: Vec<u64> = (0..nx).map(|_| [1, 2, 4, 8][rng.gen_range(0..4)]).collect();
    let p_hi: Vec<f64> = (0..nx).map(|_| rng.gen_range(1..=3) as f64).collect();
    let q_hi: Vec<f64> = (0..ny).map(|_| rng.gen_range(1..=12) as f64).collect();
    let to_matrix = |v: &[f64]| -> Vec<Vec<f64>> {
        let mut mtx = vec![vec![0.0; ny]; nx];
        for (e, &(x, y)) in net.edges().iter().enumerate() {
            mtx[x][y] = v[e];
        }
        mtx
    };
    let u = UtilityModel::linear(&net, &to_matrix(&delta), &to_matrix(&gamma)).unwrap();
    let b = Bounds::upper(p_hi, q_hi).unwrap();
    let d = TypeDistribution::from_counts(&counts).unwrap();
    Instance::new(net, u, b, d).unwrap()
}

/// Linear constraint `lo <= a . v <= hi` over the full plan vector.
pub type Row = (Vec<f64>, f64, f64);

pub fn polytope_rows(net: &Network, bounds: &Bounds, weights: &[f64]) -> Vec<Row> {
    let m = net.n_edges();
    let mut rows = Vec::new();
    for x in 0..net.n_types() {
        let mut a = vec![0.0; m];
        for &e in net.type_edges(x) {
            a[e] = 1.0;
        }
        rows.push((a, bounds.p_lo[x], bounds.p_hi[x]));
    }
    for y in 0..net.n_sources() {
        let mut a = vec![0.0; m];
        for &e in net.source_edges(y) {
            a[e] = weights[net.edges()[e].0];
        }
        rows.push((a, bounds.q_lo[y], bounds.q_hi[y]));
    }
    rows
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..n {
                        a[r][c] -= f * a[col][c];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Euclidean projection of `v` onto `{u >= 0} ∩ rows` by enumerating every
/// active set (each coordinate free or zero, each row inactive, at its lower
/// or at its upper bound) and keeping the nearest feasible candidate.
pub fn active_set_projection(v: &[f64], rows: &[Row]) -> Vec<f64> {
    let n = v.len();
    let m = rows.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for zero_mask in 0u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|i| zero_mask & (1 << i) == 0).collect();
        for code in 0..3usize.pow(m as u32) {
            let mut active = Vec::new();
            let mut c = code;
            for r in 0..m {
                match c % 3 {
                    1 => active.push((r, rows[r].1)),
                    2 => active.push((r, rows[r].2)),
                    _ => {}
                }
                c /= 3;
            }
            if active.iter().any(|(_, b)| !b.is_finite()) {
                continue;
            }
            // u_F = v_F - A_F^T lambda with A_F u_F = b
            let k = active.len();
            let gram: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    (0..k)
                        .map(|j| {
                            free.iter()
                                .map(|&f| rows[active[i].0].0[f] * rows[active[j].0].0[f])
                                .sum()
                        })
                        .collect()
                })
                .collect();
            let rhs: Vec<f64> = active
                .iter()
                .map(|&(r, b)| free.iter().map(|&f| rows[r].0[f] * v[f]).sum::<f64>() - b)
                .collect();
            let lambda = if k == 0 {
                Vec::new()
            } else {
                match solve_linear(gram, rhs) {
                    Some(l) => l,
                    None => continue,
                }
            };
            let mut u = vec![0.0; n];
            for &f in &free {
                u[f] = v[f]
                    - active
                        .iter()
                        .zip(&lambda)
                        .map(|(&(r, _), l)| l * rows[r].0[f])
                        .sum::<f64>();
            }
            let feasible = u.iter().all(|&x| x >= -1e-10)
                && rows.iter().all(|(a, lo, hi)| {
                    let s: f64 = a.iter().zip(&u).map(|(w, x)| w * x).sum();
                    let scale = a.iter().map(|w| w.abs()).fold(1.0, f64::max);
                    s >= lo - 1e-10 * scale && s <= hi + 1e-10 * scale
                });
            if !feasible {
                continue;
            }
            let d: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, u));
            }
        }
    }
    best.expect("feasible set is nonempty").1
}
