//! Runs configured experiments and writes their artifacts.
//!
//! Every run directory gets `config.json` (the config with defaults applied),
//! and on success `trace.csv`, `plan.csv` and `summary.json`; on failure
//! `error.json` instead. Floats in CSV files are written with 17 significant
//! digits so they read back bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use popot::admm::{admm_solve, AdmmSolution};
use popot::fedlearn::{fl_run, rescale_plan, Checkpoint, FlOptions, FlRun};
use popot::network::feasibility_residual;
use popot::oracle::{
    brute_force_solve, estimate_xi_seeded, nearest_optimal_plan, projected_gradient_solve,
    projected_gradient_solve_from, theorem1_report, BoundReport, TheoryParams, BRUTE_FORCE_MAX_EDGES,
};
use popot::{Error as SolverError, Instance, Network, Plan};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{load_config, to_json, ConfigError, ExperimentConfig, OracleSettings, SolverKind};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl RunError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Solver(_) => "solver",
            RunError::Io { .. } => "io",
            RunError::Format { .. } => "format",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub method: String,
    pub objective: f64,
    pub plan: Vec<f64>,
}

/// Centralized optimum: exhaustive grid search on instances with at most
/// four edges, projected gradient otherwise.
///
/// The grid winner is polished by projected gradient, since the optimum is
/// only a grid point when the vertices of the feasible set are.
pub fn oracle_solve(instance: &Instance, settings: &OracleSettings) -> Result<OracleResult, SolverError> {
    if instance.network.n_edges() <= BRUTE_FORCE_MAX_EDGES {
        let (plan, objective) = brute_force_solve(instance, settings.grid_step)?;
        let polished = projected_gradient_solve_from(instance, &plan, settings.steps, settings.rate)?;
        if polished.objective > objective + 1e-9 * objective.abs().max(1.0) {
            return Ok(OracleResult {
                method: "brute_force+projected_gradient".into(),
                objective: polished.objective,
                plan: polished.plan.into_values(),
            });
        }
        Ok(OracleResult {
            method: "brute_force".into(),
            objective,
            plan: plan.into_values(),
        })
    } else {
        let sol = projected_gradient_solve(instance, settings.steps, settings.rate)?;
        Ok(OracleResult {
            method: "projected_gradient".into(),
            objective: sol.objective,
            plan: sol.plan.into_values(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub solver: SolverKind,
    pub seed: u64,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    /// Population-weighted objective of the final plan.
    pub final_objective: f64,
    /// The same objective divided by the population.
    pub final_objective_per_capita: f64,
    pub feasibility_residual: f64,
    /// Per-type received amount `sum_y pi_xy` of the final plan.
    pub received: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleResult>,
    /// Per-type received amounts of the optimal plan nearest to the final plan.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_received: Option<Vec<f64>>,
    /// `(oracle - final) / |oracle|`
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_distribution: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub averaged_objective: Option<f64>,
    /// Objective after rescaling a plan learned with an estimated population.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rescaled_objective: Option<f64>,
    pub wall_time_s: f64,
}

/// Everything a single run produces, before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub trace_csv: String,
    pub plan_csv: String,
    pub checkpoints_csv: Option<String>,
}

fn edge_columns(prefix: &str, net: &Network) -> Vec<String> {
    net.edges()
        .iter()
        .map(|&(x, y)| format!("{prefix}_{}_{}", net.type_label(x), net.source_label(y)))
        .collect()
}

fn type_columns(prefix: &str, net: &Network) -> Vec<String> {
    net.type_labels().iter().map(|t| format!("{prefix}_{t}")).collect()
}

fn push_row(out: &mut String, fields: impl IntoIterator<Item = String>) {
    let row: Vec<String> = fields.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

pub fn fl_trace_csv(net: &Network, run: &FlRun) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = ["iteration", "sampled_type", "mu", "objective", "feasibility_residual"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(edge_columns("pi", net));
    header.extend(type_columns("received", net));
    header.extend(type_columns("pdf", net));
    push_row(&mut out, header);
    for r in &run.trace {
        let mut row = vec![
            r.iteration.to_string(),
            net.type_label(r.sampled_type).to_string(),
            num(r.mu),
            num(r.objective),
            num(r.feasibility_residual),
        ];
        row.extend(r.plan.iter().map(|&v| num(v)));
        row.extend(r.received.iter().map(|&v| num(v)));
        row.extend(r.empirical.iter().map(|&v| num(v)));
        push_row(&mut out, row);
    }
    out
}

pub fn admm_trace_csv(sol: &AdmmSolution) -> String {
    let mut out = String::from("iteration,objective,primal_residual,dual_residual\n");
    for r in &sol.trace {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.iteration,
            num(r.objective),
            num(r.primal_residual),
            num(r.dual_residual)
        );
    }
    out
}

pub fn plan_csv(net: &Network, plan: &Plan, rescaled: Option<&Plan>) -> String {
    let mut out = String::from(if rescaled.is_some() {
        "type,source,value,rescaled\n"
    } else {
        "type,source,value\n"
    });
    for (e, &(x, y)) in net.edges().iter().enumerate() {
        let _ = write!(out, "{},{},{}", net.type_label(x), net.source_label(y), num(plan[e]));
        if let Some(r) = rescaled {
            let _ = write!(out, ",{}", num(r[e]));
        }
        out.push('\n');
    }
    out
}

pub fn checkpoints_csv(net: &Network, checkpoints: &[Checkpoint]) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = vec!["k".into(), "mu_hat1".into(), "mu_hat2".into()];
    header.extend(edge_columns("avg_pi", net));
    push_row(&mut out, header);
    for c in checkpoints {
        let mut row = vec![c.k.to_string(), num(c.mu_hat1), num(c.mu_hat2)];
        row.extend(c.averaged.values().iter().map(|&v| num(v)));
        push_row(&mut out, row);
    }
    out
}

pub fn read_checkpoints(path: &Path, net: &Network) -> Result<Vec<Checkpoint>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |message: String| RunError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let width = 3 + net.n_edges();
    if header.split(',').count() != width {
        return Err(bad(format!("expected {width} columns")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(bad(format!("row {} has {} columns", i + 1, fields.len())));
            }
            let float = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
            let k = fields[0]
                .parse::<usize>()
                .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            let values = fields[3..].iter().map(|s| float(s)).collect::<Result<Vec<_>, _>>()?;
            Ok(Checkpoint {
                k,
                mu_hat1: float(fields[1])?,
                mu_hat2: float(fields[2])?,
                averaged: Plan::from_values(net, values)?,
            })
        })
        .collect()
}

fn fl_options(cfg: &ExperimentConfig, seed: u64) -> Result<FlOptions, RunError> {
    let mut opts = FlOptions::new(cfg.schedule, cfg.iterations, seed);
    opts.shifts = cfg.shift_events()?;
    opts.population_estimate = cfg.population_estimate;
    opts.checkpoint_every = cfg.checkpoint_every;
    Ok(opts)
}

/// Runs the configured solver in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    let started = Instant::now();
    let instance = cfg.instance()?;
    let net = &instance.network;
    let n = instance.dist.population() as f64;

    let mut summary = RunSummary {
        name: cfg.name.clone(),
        solver: cfg.solver,
        seed: cfg.seed,
        iterations: 0,
        converged: None,
        final_objective: 0.0,
        final_objective_per_capita: 0.0,
        feasibility_residual: 0.0,
        received: Vec::new(),
        oracle: None,
        oracle_received: None,
        relative_gap: None,
        empirical_distribution: None,
        averaged_objective: None,
        rescaled_objective: None,
        wall_time_s: 0.0,
    };

    // The instance the final plan is judged against (after any shifts).
    let judged;
    let (plan, trace_csv, plan_out, checkpoints) = match cfg.solver {
        SolverKind::Admm => {
            judged = instance.clone();
            let sol = admm_solve(&instance, &cfg.admm.into())?;
            summary.iterations = sol.iterations;
            summary.converged = Some(sol.converged);
            let csv = admm_trace_csv(&sol);
            let plan_out = plan_csv(net, &sol.plan, None);
            (sol.plan, csv, plan_out, None)
        }
        SolverKind::Federated => {
            let opts = fl_options(cfg, cfg.seed)?;
            let run = fl_run(&instance, &opts)?;
            judged = instance.with_distribution(run.final_distribution.clone())?;
            summary.iterations = cfg.iterations;
            summary.empirical_distribution = Some(run.state.counter.distribution());
            summary.averaged_objective = Some(judged.objective(&run.state.averaged_plan()));
            let n_est = cfg.population_estimate.unwrap_or(n);
            let rescaled = if n_est != n {
                let r = rescale_plan(&run.plan, n, n_est)?;
                summary.rescaled_objective = Some(judged.objective(&r));
                Some(r)
            } else {
                None
            };
            let csv = fl_trace_csv(net, &run);
            let plan_out = plan_csv(net, &run.plan, rescaled.as_ref());
            let cps = checkpoints_csv(net, &run.checkpoints);
            (run.plan, csv, plan_out, Some(cps))
        }
        SolverKind::Oracle => {
            judged = instance.clone();
            let o = oracle_solve(&instance, &cfg.oracle)?;
            let plan = Plan::from_values(net, o.plan)?;
            summary.iterations = 1;
            let mut csv = String::new();
            let mut header = vec!["iteration".to_string(), "objective".to_string()];
            header.extend(edge_columns("pi", net));
            header.extend(type_columns("received", net));
            push_row(&mut csv, header);
            let mut row = vec!["1".to_string(), num(o.objective)];
            row.extend(plan.values().iter().map(|&v| num(v)));
            row.extend(plan.received(net).iter().map(|&v| num(v)));
            push_row(&mut csv, row);
            let plan_out = plan_csv(net, &plan, None);
            (plan, csv, plan_out, None)
        }
    };

    summary.final_objective = judged.objective(&plan);
    summary.final_objective_per_capita = summary.final_objective / n;
    summary.feasibility_residual = feasibility_residual(&plan, net, &judged.bounds, &judged.dist)?;
    summary.received = plan.received(net);
    if cfg.compare_oracle {
        let o = oracle_solve(&judged, &cfg.oracle)?;
        summary.relative_gap = Some((o.objective - summary.final_objective) / o.objective.abs().max(f64::MIN_POSITIVE));
        let nearest = if judged.utility.is_linear() {
            nearest_optimal_plan(&judged, &plan, o.objective * (1.0 - 1e-9)).ok()
        } else {
            None
        };
        let reference = nearest.unwrap_or(Plan::from_values(net, o.plan.clone())?);
        summary.oracle_received = Some(reference.received(net));
        summary.oracle = Some(o);
    }
    summary.wall_time_s = started.elapsed().as_secs_f64();
    Ok(RunOutput {
        summary,
        trace_csv,
        plan_csv: plan_out,
        checkpoints_csv: checkpoints,
    })
}

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    kind: &'a str,
    message: String,
}

fn write_error(out: &Path, err: &RunError) {
    let record = ErrorRecord {
        kind: err.kind(),
        message: err.to_string(),
    };
    if fs::create_dir_all(out).is_ok() {
        let text = serde_json::to_string_pretty(&record).expect("error record serializes");
        let _ = fs::write(out.join("error.json"), text + "\n");
    }
}

fn write_output(out: &Path, cfg: &ExperimentConfig, output: &RunOutput) -> Result<(), RunError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("config.json"), &to_json(cfg))?;
    write_file(&out.join("trace.csv"), &output.trace_csv)?;
    write_file(&out.join("plan.csv"), &output.plan_csv)?;
    if let Some(cps) = &output.checkpoints_csv {
        write_file(&out.join("checkpoints.csv"), cps)?;
    }
    let summary = serde_json::to_string_pretty(&output.summary).expect("summary serializes");
    write_file(&out.join("summary.json"), &(summary + "\n"))
}

/// Runs one experiment (or an ensemble when `cfg.ensemble` is set) and writes
/// its artifacts under `out`. Failures are also recorded in `out/error.json`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>, RunError> {
    let result = match cfg.ensemble {
        Some(runs) => run_ensemble(cfg, runs, out),
        None => execute(cfg).and_then(|o| {
            write_output(out, cfg, &o)?;
            Ok(vec![o.summary])
        }),
    };
    if let Err(e) = &result {
        write_error(out, e);
    }
    result
}

/// Federated runs with seeds `seed, seed + 1, ...`, one subdirectory each.
fn run_ensemble(cfg: &ExperimentConfig, runs: usize, out: &Path) -> Result<Vec<RunSummary>, RunError> {
    if cfg.solver != SolverKind::Federated {
        return Err(ConfigError::Validation {
            field: "ensemble".into(),
            message: "ensembles need the federated solver".into(),
        }
        .into());
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("config.json"), &to_json(cfg))?;
    let mut summaries = Vec::with_capacity(runs);
    for i in 0..runs {
        let mut member = cfg.clone();
        member.seed = cfg.seed + i as u64;
        member.ensemble = None;
        member.compare_oracle = false;
        let output = execute(&member)?;
        write_output(&out.join(format!("run_{i:03}")), &member, &output)?;
        summaries.push(output.summary);
    }
    Ok(summaries)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub params: TheoryParams,
    pub xi_samples_used: usize,
    /// Which objective convention each gap column uses.
    pub conventions: String,
    pub rows: Vec<BoundReport>,
}

/// Bound report for an ensemble directory written by [`run`].
///
/// `F*` is the optimal objective divided by the population, `r0` the distance
/// from the zero start to the nearest optimal plan, the regularity constant is
/// estimated from random points and the Lipschitz constant comes from the
/// utility model.
pub fn report_ensemble(dir: &Path) -> Result<EnsembleReport, RunError> {
    let cfg = load_config(&dir.join("config.json"))?;
    let instance = cfg.instance()?;
    let judged = instance.with_distribution(cfg.distribution_at_shifts()?)?;
    let net = &instance.network;

    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("checkpoints.csv").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(RunError::Format {
            path: dir.to_path_buf(),
            message: "no run directories with checkpoints.csv".into(),
        });
    }
    let ensemble = runs
        .iter()
        .map(|r| read_checkpoints(&r.join("checkpoints.csv"), net))
        .collect::<Result<Vec<_>, _>>()?;

    let o = oracle_solve(&judged, &cfg.oracle)?;
    let n = judged.dist.population() as f64;
    let zero = Plan::zeros(net);
    let optimum = if judged.utility.is_linear() {
        nearest_optimal_plan(&judged, &zero, o.objective * (1.0 - 1e-9))?
    } else {
        Plan::from_values(net, o.plan.clone())?
    };
    let xi = estimate_xi_seeded(&judged, 500, cfg.seed)?;
    let params = TheoryParams {
        xi: xi.xi,
        l_sum: judged.utility.lipschitz_sum(),
        r0: zero.distance(&optimum),
        f_star: o.objective / n,
    };
    let rows = theorem1_report(&judged, &ensemble, &params)?;
    let report = EnsembleReport {
        params,
        xi_samples_used: xi.used,
        conventions: "gap_per_capita = F(avg) - F* with F = -objective / N; gap_total multiplies by N".into(),
        rows,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&dir.join("report.json"), &(text + "\n"))?;
    Ok(report)
}

/// Panels extracted from a trace by [`emit_plot_data`], with the column
/// prefix each one collects.
pub const PLOT_PANELS: [(&str, &str); 4] = [
    ("pdf.csv", "pdf_"),
    ("plan_trajectory.csv", "pi_"),
    ("objective.csv", "objective"),
    ("received.csv", "received_"),
];

/// Splits a trace into one CSV per figure panel (`iteration` plus the
/// panel's columns). Panels with no matching columns are skipped.
pub fn emit_plot_data(trace: &Path, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let text = fs::read_to_string(trace).map_err(io_err(trace))?;
    let bad = |message: &str| RunError::Format {
        path: trace.to_path_buf(),
        message: message.to_string(),
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty trace"))?.split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    if rows.is_empty() {
        return Err(bad("trace has no data rows"));
    }
    if rows.iter().any(|r| r.len() != header.len()) {
        return Err(bad("ragged rows"));
    }
    let iter_col = header
        .iter()
        .position(|h| *h == "iteration")
        .ok_or_else(|| bad("no iteration column"))?;

    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    for (file, prefix) in PLOT_PANELS {
        let cols: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                if prefix.ends_with('_') {
                    h.starts_with(prefix)
                } else {
                    **h == prefix
                }
            })
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            continue;
        }
        let mut body = String::new();
        let pick = |r: &[&str]| -> Vec<String> {
            std::iter::once(r[iter_col])
                .chain(cols.iter().map(|&c| r[c]))
                .map(String::from)
                .collect()
        };
        push_row(&mut body, pick(&header));
        for r in &rows {
            push_row(&mut body, pick(r));
        }
        let path = out.join(file);
        write_file(&path, &body)?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(bad("no plottable columns"));
    }
    Ok(written)
}
