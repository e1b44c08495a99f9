//! Transport network, population model and capacity bounds.
//!
//! Types and sources are dense indices internally. Edges are stored in
//! type-major order (sorted by `(type, source)`), so an edge id is a stable
//! position in every edge-indexed vector such as [`Plan`].

use std::collections::HashMap;
use std::fmt::Display;
use std::hash::Hash;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection;

/// Tolerance on the sum of a type distribution.
pub const PROBABILITY_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    type_labels: Vec<String>,
    source_labels: Vec<String>,
    edges: Vec<(usize, usize)>,
    // dense (type, source) -> edge id lookup
    edge_lookup: Vec<Option<usize>>,
    type_edges: Vec<Vec<usize>>,
    source_edges: Vec<Vec<usize>>,
}

impl Network {
    /// Builds a network from external identifiers.
    ///
    /// Adjacency is derived from `edges`; the result does not depend on the
    /// order in which edges are listed.
    pub fn build<L>(types: &[L], sources: &[L], edges: &[(L, L)]) -> Result<Self>
    where
        L: Eq + Hash + Display,
    {
        let type_index = index_labels(types)?;
        let source_index = index_labels(sources)?;

        let mut pairs = Vec::with_capacity(edges.len());
        for (t, s) in edges {
            let x = *type_index.get(t).ok_or_else(|| Error::UnknownNode(t.to_string()))?;
            let y = *source_index.get(s).ok_or_else(|| Error::UnknownNode(s.to_string()))?;
            pairs.push((x, y));
        }
        pairs.sort_unstable();
        for w in pairs.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateEdge(
                    types[w[0].0].to_string(),
                    sources[w[0].1].to_string(),
                ));
            }
        }

        let n_types = types.len();
        let n_sources = sources.len();
        let mut edge_lookup = vec![None; n_types * n_sources];
        let mut type_edges = vec![Vec::new(); n_types];
        let mut source_edges = vec![Vec::new(); n_sources];
        for (e, &(x, y)) in pairs.iter().enumerate() {
            edge_lookup[x * n_sources + y] = Some(e);
            type_edges[x].push(e);
            source_edges[y].push(e);
        }
        if let Some(x) = type_edges.iter().position(Vec::is_empty) {
            return Err(Error::IsolatedNode(types[x].to_string()));
        }
        if let Some(y) = source_edges.iter().position(Vec::is_empty) {
            return Err(Error::IsolatedNode(sources[y].to_string()));
        }

        Ok(Self {
            type_labels: types.iter().map(ToString::to_string).collect(),
            source_labels: sources.iter().map(ToString::to_string).collect(),
            edges: pairs,
            edge_lookup,
            type_edges,
            source_edges,
        })
    }

    /// Complete bipartite network over `n_types` x `n_sources`, labelled `1..`.
    pub fn complete(n_types: usize, n_sources: usize) -> Result<Self> {
        let types: Vec<usize> = (1..=n_types).collect();
        let sources: Vec<usize> = (1..=n_sources).collect();
        let edges: Vec<(usize, usize)> = types
            .iter()
            .flat_map(|&x| sources.iter().map(move |&y| (x, y)))
            .collect();
        Self::build(&types, &sources, &edges)
    }

    pub fn n_types(&self) -> usize {
        self.type_labels.len()
    }

    pub fn n_sources(&self) -> usize {
        self.source_labels.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn type_label(&self, x: usize) -> &str {
        &self.type_labels[x]
    }

    pub fn source_label(&self, y: usize) -> &str {
        &self.source_labels[y]
    }

    pub fn type_labels(&self) -> &[String] {
        &self.type_labels
    }

    pub fn source_labels(&self) -> &[String] {
        &self.source_labels
    }

    /// `(type, source)` of every edge, indexed by edge id.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge(&self, x: usize, y: usize) -> Option<usize> {
        if x >= self.n_types() || y >= self.n_sources() {
            return None;
        }
        self.edge_lookup[x * self.n_sources() + y]
    }

    /// Edge ids incident to type `x`, ordered by source.
    pub fn type_edges(&self, x: usize) -> &[usize] {
        &self.type_edges[x]
    }

    /// Edge ids incident to source `y`, ordered by type.
    pub fn source_edges(&self, y: usize) -> &[usize] {
        &self.source_edges[y]
    }

    /// Sources adjacent to type `x` (the set `Y_x`).
    pub fn sources_of(&self, x: usize) -> impl Iterator<Item = usize> + '_ {
        self.type_edges[x].iter().map(move |&e| self.edges[e].1)
    }

    /// Types adjacent to source `y` (the set `X_y`).
    pub fn types_of(&self, y: usize) -> impl Iterator<Item = usize> + '_ {
        self.source_edges[y].iter().map(move |&e| self.edges[e].0)
    }
}

fn index_labels<L: Eq + Hash + Display>(labels: &[L]) -> Result<HashMap<&L, usize>> {
    let mut map = HashMap::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        if map.insert(l, i).is_some() {
            return Err(Error::DuplicateIdentifier(l.to_string()));
        }
    }
    Ok(map)
}

/// Per-type received-resource bounds (per node) and per-source shipped-resource
/// bounds (aggregate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
}

impl Bounds {
    pub fn new(p_lo: Vec<f64>, p_hi: Vec<f64>, q_lo: Vec<f64>, q_hi: Vec<f64>) -> Result<Self> {
        let b = Self { p_lo, p_hi, q_lo, q_hi };
        b.check_pairs()?;
        Ok(b)
    }

    /// Upper bounds only; lower bounds default to zero.
    pub fn upper(p_hi: Vec<f64>, q_hi: Vec<f64>) -> Result<Self> {
        let p_lo = vec![0.0; p_hi.len()];
        let q_lo = vec![0.0; q_hi.len()];
        Self::new(p_lo, p_hi, q_lo, q_hi)
    }

    fn check_pairs(&self) -> Result<()> {
        if self.p_lo.len() != self.p_hi.len() {
            return Err(Error::InvalidBounds("p_lo and p_hi differ in length".into()));
        }
        if self.q_lo.len() != self.q_hi.len() {
            return Err(Error::InvalidBounds("q_lo and q_hi differ in length".into()));
        }
        for (i, (&lo, &hi)) in self.p_lo.iter().zip(&self.p_hi).enumerate() {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::InvalidBounds(format!(
                    "need 0 <= p_lo <= p_hi for type index {i}, got [{lo}, {hi}]"
                )));
            }
        }
        for (i, (&lo, &hi)) in self.q_lo.iter().zip(&self.q_hi).enumerate() {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::InvalidBounds(format!(
                    "need 0 <= q_lo <= q_hi for source index {i}, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self, network: &Network) -> Result<()> {
        self.check_pairs()?;
        if self.p_hi.len() != network.n_types() {
            return Err(Error::DimensionMismatch {
                expected: network.n_types(),
                got: self.p_hi.len(),
            });
        }
        if self.q_hi.len() != network.n_sources() {
            return Err(Error::DimensionMismatch {
                expected: network.n_sources(),
                got: self.q_hi.len(),
            });
        }
        Ok(())
    }
}

/// Type proportions of the target population together with its size `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDistribution {
    prob: Vec<f64>,
    population: u64,
}

impl TypeDistribution {
    pub fn new(prob: Vec<f64>, population: u64) -> Result<Self> {
        if prob.is_empty() {
            return Err(Error::InvalidDistribution("no types".into()));
        }
        if population == 0 {
            return Err(Error::InvalidDistribution("population must be positive".into()));
        }
        if let Some(p) = prob.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidDistribution(format!(
                "every probability must be positive, found {p}"
            )));
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > PROBABILITY_SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { prob, population })
    }

    /// Builds a distribution from integer type counts, `N = sum(counts)`.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return Err(Error::InvalidDistribution("population must be positive".into()));
        }
        let prob = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Self::new(prob, n)
    }

    pub fn prob(&self) -> &[f64] {
        &self.prob
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    pub fn n_types(&self) -> usize {
        self.prob.len()
    }

    /// Number of type-`x` targets, `P_t(x) * N`, kept real-valued.
    pub fn count(&self, x: usize) -> f64 {
        self.prob[x] * self.population as f64
    }

    pub fn counts(&self) -> Vec<f64> {
        (0..self.prob.len()).map(|x| self.count(x)).collect()
    }

    pub fn with_population(&self, population: u64) -> Result<Self> {
        Self::new(self.prob.clone(), population)
    }

    pub fn validate(&self, network: &Network) -> Result<()> {
        if self.prob.len() != network.n_types() {
            return Err(Error::DimensionMismatch {
                expected: network.n_types(),
                got: self.prob.len(),
            });
        }
        Ok(())
    }
}

/// Per-edge transport amounts, in resource units per node of the edge's type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    values: Vec<f64>,
}

impl Plan {
    pub fn zeros(network: &Network) -> Self {
        Self {
            values: vec![0.0; network.n_edges()],
        }
    }

    pub fn from_values(network: &Network, values: Vec<f64>) -> Result<Self> {
        if values.len() != network.n_edges() {
            return Err(Error::DimensionMismatch {
                expected: network.n_edges(),
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    /// Builds a plan from a dense `|X| x |Y|` matrix; entries off the edge set
    /// are ignored.
    pub fn from_matrix(network: &Network, matrix: &[Vec<f64>]) -> Result<Self> {
        check_matrix_shape(network, matrix)?;
        let values = network.edges().iter().map(|&(x, y)| matrix[x][y]).collect();
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, network: &Network, x: usize, y: usize) -> Option<f64> {
        network.edge(x, y).map(|e| self.values[e])
    }

    /// Dense `|X| x |Y|` view, zero off the edge set.
    pub fn to_matrix(&self, network: &Network) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; network.n_sources()]; network.n_types()];
        for (e, &(x, y)) in network.edges().iter().enumerate() {
            m[x][y] = self.values[e];
        }
        m
    }

    /// Values on the edges of type `x`, ordered by source.
    pub fn row(&self, network: &Network, x: usize) -> Vec<f64> {
        network.type_edges(x).iter().map(|&e| self.values[e]).collect()
    }

    /// Per-node resources received by each type, `sum_y pi_xy`.
    pub fn received(&self, network: &Network) -> Vec<f64> {
        (0..network.n_types())
            .map(|x| network.type_edges(x).iter().map(|&e| self.values[e]).sum())
            .collect()
    }

    /// Aggregate amount shipped by each source under the given per-type weights.
    pub fn shipped(&self, network: &Network, weights: &[f64]) -> Vec<f64> {
        (0..network.n_sources())
            .map(|y| {
                network
                    .source_edges(y)
                    .iter()
                    .map(|&e| self.values[e] * weights[network.edges()[e].0])
                    .sum()
            })
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn distance(&self, other: &Plan) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Plan) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Index<usize> for Plan {
    type Output = f64;

    fn index(&self, e: usize) -> &f64 {
        &self.values[e]
    }
}

impl IndexMut<usize> for Plan {
    fn index_mut(&mut self, e: usize) -> &mut f64 {
        &mut self.values[e]
    }
}

pub(crate) fn check_matrix_shape(network: &Network, matrix: &[Vec<f64>]) -> Result<()> {
    if matrix.len() != network.n_types() {
        return Err(Error::DimensionMismatch {
            expected: network.n_types(),
            got: matrix.len(),
        });
    }
    for row in matrix {
        if row.len() != network.n_sources() {
            return Err(Error::DimensionMismatch {
                expected: network.n_sources(),
                got: row.len(),
            });
        }
    }
    Ok(())
}

/// Euclidean distance from `plan` to the feasible polytope of the centralized
/// problem under `dist`. Zero iff the plan is feasible (up to the projection
/// tolerance).
pub fn feasibility_residual(plan: &Plan, network: &Network, bounds: &Bounds, dist: &TypeDistribution) -> Result<f64> {
    if projection::max_violation(plan, network, bounds, &dist.counts()) == 0.0 {
        return Ok(0.0);
    }
    let (projected, _) = projection::project_feasible_plan(plan, network, bounds, &dist.counts())?;
    Ok(plan.distance(&projected))
}
