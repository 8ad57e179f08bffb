//! `percolate`: solve, simulate and compare information-percolation markets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "percolate", version, about = "Information percolation in search-and-matching markets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scenario's `n_max`.
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Overrides the root and value-iteration tolerances.
    #[arg(long)]
    pub tol: Option<f64>,
    /// `trigger:N`, `const:c` or `list:path`.
    #[arg(long)]
    pub policy: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stationary precision measure of a policy.
    SolveStationary {
        #[command(flatten)]
        common: Common,
    },
    /// Integrate the precision distribution forward in time; writes tidy CSV.
    SimulateDynamics {
        #[command(flatten)]
        common: Common,
        /// Final time; defaults to `50/η`.
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        dt_out: f64,
        /// `pi` or `point:n`.
        #[arg(long, default_value = "pi")]
        init: String,
    },
    /// Optimal effort against a market.
    BestResponse {
        #[command(flatten)]
        common: Common,
        /// Market JSON written by `solve-stationary`; otherwise built from `--policy`.
        #[arg(long)]
        market: Option<PathBuf>,
    },
    /// All symmetric trigger equilibria.
    SolveEquilibrium {
        #[command(flatten)]
        common: Common,
        /// Accept convex costs by restricting agents to `{c_lo, c_hi}`.
        #[arg(long)]
        allow_convex: bool,
    },
    /// Subsidy and public-signal interventions.
    Intervention {
        #[command(subcommand)]
        kind: InterventionKind,
    },
    /// Agent-based simulation and lifetime-value sampling.
    Montecarlo {
        #[command(subcommand)]
        kind: MonteCarloKind,
    },
    /// Effort feedback with efforts only at precisions 1 and 2.
    Counterexample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.5)]
        c2: f64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Runs a parameter grid concurrently; writes tidy CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid JSON with lists `eta`, `rho`, `c_lo`, `kappa` and optional `triggers`.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, value_enum, default_value = "stationary")]
        what: commands::SweepKind,
    },
}

#[derive(Debug, Subcommand)]
enum InterventionKind {
    Subsidy {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "witness")]
        delta: Option<f64>,
        /// Tune `κ` and `δ` from the scenario instead of using `--delta`.
        #[arg(long)]
        witness: bool,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, value_enum, default_value = "pareto-best")]
        selection: commands::SelectionArg,
    },
    Educate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "witness")]
        m: Option<usize>,
        /// Tune `κ` over `--candidates` instead of using the scenario's.
        #[arg(long)]
        witness: bool,
        /// Comma-separated `c_hi:rho` pairs for the witness search.
        #[arg(long, default_value = "2:0.3,3:0.3,5:0.3")]
        candidates: String,
        #[arg(long, value_enum, default_value = "pareto-best")]
        selection: commands::SelectionArg,
    },
}

#[derive(Debug, Subcommand)]
enum MonteCarloKind {
    /// Population simulation; writes snapshot CSV.
    Run {
        #[command(flatten)]
        common: Common,
        /// Simulation JSON; defaults to 10⁵ agents up to `50/η`.
        #[arg(long)]
        sim: Option<PathBuf>,
    },
    /// Lifetime utility of an entrant.
    Value {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        entry: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::SolveStationary { common } => commands::solve_stationary(&common, &argv),
        Command::SimulateDynamics { common, t_end, dt_out, init } => {
            commands::simulate_dynamics(&common, &argv, t_end, dt_out, &init)
        }
        Command::BestResponse { common, market } => commands::best_response(&common, &argv, market.as_deref()),
        Command::SolveEquilibrium { common, allow_convex } => commands::solve_equilibrium(&common, &argv, allow_convex),
        Command::Intervention { kind } => match kind {
            InterventionKind::Subsidy { common, delta, witness, steps, selection } => {
                commands::subsidy(&common, &argv, delta, witness, steps, selection)
            }
            InterventionKind::Educate { common, m, witness, candidates, selection } => {
                commands::educate(&common, &argv, m, witness, &candidates, selection)
            }
        },
        Command::Montecarlo { kind } => match kind {
            MonteCarloKind::Run { common, sim } => commands::montecarlo_run(&common, &argv, sim.as_deref()),
            MonteCarloKind::Value { common, sim, entry } => {
                commands::montecarlo_value(&common, &argv, sim.as_deref(), entry)
            }
        },
        Command::Counterexample { common, c2, eps } => commands::counterexample(&common, &argv, c2, eps),
        Command::Sweep { common, grid, what } => commands::sweep(&common, &argv, &grid, what),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
