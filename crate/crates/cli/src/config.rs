//! Experiment configuration: JSON schema, defaults and validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use popot::admm::AdmmConfig;
use popot::fedlearn::{ShiftEvent, StepSchedule};
use popot::{Bounds, EdgeUtility, Family, Instance, Network, TypeDistribution, UtilityModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl fmt::Display) -> Self {
        ConfigError::Validation {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

/// Node identifier as written in the config: a number or a string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Int(i64),
    Str(String),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Int(i) => write!(f, "{i}"),
            Label::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeSpec {
    /// The string `"complete"`.
    Keyword(String),
    List(Vec<(Label, Label)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub types: Vec<Label>,
    pub sources: Vec<Label>,
    pub edges: EdgeSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    #[default]
    Linear,
    Log,
    Sqrt,
}

impl From<FamilyName> for Family {
    fn from(f: FamilyName) -> Self {
        match f {
            FamilyName::Linear => Family::Linear,
            FamilyName::Log => Family::Log,
            FamilyName::Sqrt => Family::Sqrt,
        }
    }
}

/// Target (`delta`) and source (`gamma`) coefficient matrices, row-major over
/// types then sources. Entries off the edge set are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    #[serde(default)]
    pub family: FamilyName,
    pub delta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_sum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default)]
    pub p_lo: Option<Vec<f64>>,
    pub p_hi: Vec<f64>,
    #[serde(default)]
    pub q_lo: Option<Vec<f64>>,
    pub q_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    pub prob: Vec<f64>,
    pub population: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub at_iteration: usize,
    pub prob: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Admm,
    #[default]
    Federated,
    Oracle,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Admm => "admm",
            SolverKind::Federated => "federated",
            SolverKind::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmSettings {
    pub eta: f64,
    pub max_iterations: usize,
    pub primal_tol: f64,
    pub dual_tol: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        let d = AdmmConfig::default();
        Self {
            eta: d.eta,
            max_iterations: d.max_iterations,
            primal_tol: d.primal_tol,
            dual_tol: d.dual_tol,
        }
    }
}

impl From<AdmmSettings> for AdmmConfig {
    fn from(s: AdmmSettings) -> Self {
        AdmmConfig {
            eta: s.eta,
            max_iterations: s.max_iterations,
            primal_tol: s.primal_tol,
            dual_tol: s.dual_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    /// Grid resolution of the exhaustive search (instances with at most 4 edges).
    pub grid_step: f64,
    /// Projected gradient steps, for larger instances and for polishing the grid winner.
    pub steps: usize,
    pub rate: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            grid_step: 0.125,
            steps: 20_000,
            rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub network: NetworkConfig,
    pub utility: UtilityConfig,
    pub bounds: BoundsConfig,
    pub distribution: DistributionConfig,
    /// Population assumed by the federated projection; the true population
    /// when absent.
    #[serde(default)]
    pub population_estimate: Option<f64>,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default = "default_schedule")]
    pub schedule: StepSchedule,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub shifts: Vec<ShiftConfig>,
    #[serde(default)]
    pub admm: AdmmSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
    /// Solve the centralized problem too and report the relative gap.
    #[serde(default = "default_true")]
    pub compare_oracle: bool,
    /// Number of seeded federated runs (seeds `seed`, `seed + 1`, ...).
    #[serde(default)]
    pub ensemble: Option<usize>,
    /// Averaged-plan checkpoint spacing for ensemble runs.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_schedule() -> StepSchedule {
    StepSchedule::InverseSqrt { scale: 0.5 }
}

fn default_iterations() -> usize {
    8000
}

pub const DEFAULT_SEED: u64 = 42;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_true() -> bool {
    true
}

fn default_checkpoint_every() -> usize {
    100
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Reads, parses and validates a config file. Optional lower bounds are
/// filled in with zeros so the returned value is fully explicit.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let nx = cfg.network.types.len();
    let ny = cfg.network.sources.len();
    cfg.bounds.p_lo.get_or_insert_with(|| vec![0.0; nx]);
    cfg.bounds.q_lo.get_or_insert_with(|| vec![0.0; ny]);
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) -> Result<(), ConfigError> {
    let text = to_json(cfg);
    fs::write(path, text).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_json(cfg: &ExperimentConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.instance()?;
        self.distribution_at_shifts()?;
        self.schedule
            .validate()
            .map_err(|e| ConfigError::invalid("schedule", e))?;
        if self.iterations == 0 {
            return Err(ConfigError::invalid("iterations", "must be at least 1"));
        }
        if let Some(n) = self.population_estimate {
            if !(n > 0.0 && n.is_finite()) {
                return Err(ConfigError::invalid("population_estimate", "must be positive"));
            }
        }
        AdmmConfig::from(self.admm)
            .validate()
            .map_err(|e| ConfigError::invalid("admm", e))?;
        if !(self.oracle.grid_step > 0.0 && self.oracle.rate > 0.0) {
            return Err(ConfigError::invalid("oracle", "grid_step and rate must be positive"));
        }
        if self.ensemble == Some(0) {
            return Err(ConfigError::invalid("ensemble", "must be at least 1 run"));
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Network, ConfigError> {
        let n = &self.network;
        let edges: Vec<(Label, Label)> = match &n.edges {
            EdgeSpec::Keyword(k) if k == "complete" => n
                .types
                .iter()
                .flat_map(|t| n.sources.iter().map(move |s| (t.clone(), s.clone())))
                .collect(),
            EdgeSpec::Keyword(k) => {
                return Err(ConfigError::invalid(
                    "network.edges",
                    format!("expected \"complete\" or a list of pairs, got \"{k}\""),
                ))
            }
            EdgeSpec::List(list) => list.clone(),
        };
        Network::build(&n.types, &n.sources, &edges).map_err(|e| ConfigError::invalid("network", e))
    }

    fn matrix_entries(&self, net: &Network, field: &str, m: &[Vec<f64>]) -> Result<Vec<f64>, ConfigError> {
        let (nx, ny) = (net.n_types(), net.n_sources());
        if m.len() != nx || m.iter().any(|r| r.len() != ny) {
            return Err(ConfigError::invalid(field, format!("matrix must be {nx}x{ny}")));
        }
        Ok(net.edges().iter().map(|&(x, y)| m[x][y]).collect())
    }

    pub fn utility_model(&self, net: &Network) -> Result<UtilityModel, ConfigError> {
        let u = &self.utility;
        let family = Family::from(u.family);
        let target: Vec<EdgeUtility> = self
            .matrix_entries(net, "utility.delta", &u.delta)?
            .into_iter()
            .map(|c| family.make(c))
            .collect();
        let source: Vec<EdgeUtility> = self
            .matrix_entries(net, "utility.gamma", &u.gamma)?
            .into_iter()
            .map(|c| family.make(c))
            .collect();
        let mut model = UtilityModel::new(net, target, source).map_err(|e| ConfigError::invalid("utility", e))?;
        if let Some(l) = u.lipschitz_sum {
            if !(l > 0.0 && l.is_finite()) {
                return Err(ConfigError::invalid("utility.lipschitz_sum", "must be positive"));
            }
            model = model.with_lipschitz_sum(l);
        }
        Ok(model)
    }

    pub fn bounds(&self) -> Result<Bounds, ConfigError> {
        let b = &self.bounds;
        let nx = self.network.types.len();
        let ny = self.network.sources.len();
        let p_lo = b.p_lo.clone().unwrap_or_else(|| vec![0.0; nx]);
        let q_lo = b.q_lo.clone().unwrap_or_else(|| vec![0.0; ny]);
        for (field, v, n) in [
            ("bounds.p_lo", &p_lo, nx),
            ("bounds.p_hi", &b.p_hi, nx),
            ("bounds.q_lo", &q_lo, ny),
            ("bounds.q_hi", &b.q_hi, ny),
        ] {
            if v.len() != n {
                return Err(ConfigError::invalid(
                    field,
                    format!("expected {n} entries, got {}", v.len()),
                ));
            }
        }
        Bounds::new(p_lo, b.p_hi.clone(), q_lo, b.q_hi.clone()).map_err(|e| ConfigError::invalid("bounds", e))
    }

    pub fn distribution(&self) -> Result<TypeDistribution, ConfigError> {
        let d = &self.distribution;
        if d.prob.len() != self.network.types.len() {
            return Err(ConfigError::invalid(
                "distribution.prob",
                format!("expected {} entries, got {}", self.network.types.len(), d.prob.len()),
            ));
        }
        TypeDistribution::new(d.prob.clone(), d.population).map_err(|e| ConfigError::invalid("distribution", e))
    }

    pub fn instance(&self) -> Result<Instance, ConfigError> {
        let net = self.network()?;
        let utility = self.utility_model(&net)?;
        let bounds = self.bounds()?;
        let dist = self.distribution()?;
        Instance::new(net, utility, bounds, dist).map_err(|e| ConfigError::invalid("instance", e))
    }

    pub fn shift_events(&self) -> Result<Vec<ShiftEvent>, ConfigError> {
        self.shifts
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let field = format!("shifts[{i}]");
                if s.at_iteration == 0 {
                    return Err(ConfigError::invalid(&field, "at_iteration must be at least 1"));
                }
                if s.prob.len() != self.network.types.len() {
                    return Err(ConfigError::invalid(&field, "prob has the wrong length"));
                }
                let distribution = TypeDistribution::new(s.prob.clone(), self.distribution.population)
                    .map_err(|e| ConfigError::invalid(&field, e))?;
                Ok(ShiftEvent {
                    at_iteration: s.at_iteration,
                    distribution,
                })
            })
            .collect()
    }

    /// Sampling distribution in force after the last iteration.
    pub fn distribution_at_shifts(&self) -> Result<TypeDistribution, ConfigError> {
        let mut events = self.shift_events()?;
        events.sort_by_key(|s| s.at_iteration);
        Ok(events
            .into_iter()
            .rfind(|s| s.at_iteration < self.iterations)
            .map(|s| s.distribution)
            .unwrap_or(self.distribution()?))
    }
}
