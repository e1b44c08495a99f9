use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use popot_cli::{emit_plot_data, load_config, report_ensemble, run, RunError, SolverKind};

/// `println!` that ignores a closed stdout (e.g. when piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "popot", version, about = "Optimal transport over large typed populations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver described by a config file.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        solver: Option<SolverKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare an ensemble of federated runs against the convergence bounds.
    Report {
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// Split a trace into one CSV per plot panel.
    PlotData {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::Solve {
            config,
            solver,
            seed,
            iterations,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = solver {
                cfg.solver = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(k) = iterations {
                cfg.iterations = k;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            for s in run(&cfg, &out)? {
                let gap = s
                    .relative_gap
                    .map(|g| format!(", relative gap {g:.3e}"))
                    .unwrap_or_default();
                say!(
                    "{} seed {}: objective {:.6} after {} iterations{gap}",
                    s.solver,
                    s.seed,
                    s.final_objective,
                    s.iterations
                );
            }
            say!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Report { ensemble } => {
            let report = report_ensemble(&ensemble)?;
            let p = &report.params;
            say!(
                "xi {:.4} (from {} points), L {:.4}, r0 {:.4}, F* {:.6} per capita",
                p.xi,
                report.xi_samples_used,
                p.l_sum,
                p.r0,
                p.f_star
            );
            say!(
                "{:>8} {:>13} {:>13} {:>13} {:>13} {:>13}",
                "k",
                "lower",
                "gap",
                "upper",
                "dist2",
                "dist2 bound"
            );
            for r in &report.rows {
                say!(
                    "{:>8} {:>13.5e} {:>13.5e} {:>13.5e} {:>13.5e} {:>13.5e}{}",
                    r.k,
                    r.bounds.lower,
                    r.gap_per_capita,
                    r.bounds.upper,
                    r.dist2,
                    r.bounds.feasibility,
                    if r.violations.is_empty() { "" } else { "  !" }
                );
            }
            say!("report written to {}", ensemble.join("report.json").display());
            Ok(())
        }
        Command::PlotData { trace, out } => {
            for p in emit_plot_data(&trace, &out)? {
                say!("{}", p.display());
            }
            Ok(())
        }
    }
}
