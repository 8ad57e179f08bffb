use std::fs;
use std::path::Path;

use clap::ValueEnum;
use percolate_core::best_response::{minimal_search_test, n_bar, solve_value_with};
use percolate_core::dynamics::integrate_with;
use percolate_core::equilibrium::find_equilibria_with;
use percolate_core::interventions::{
    evaluate_education, evaluate_subsidy, find_education_witness, find_subsidy_witness, Selection,
};
use percolate_core::model::CostSpec;
use percolate_core::simulator::{estimate_value, run, SimConfig};
use percolate_core::stationary::{effort_feedback_example, solve_stationary_with};
use percolate_core::{Error, MarketState, ModelParams, Policy, PrecisionMeasure, SolverConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::Sink;
use crate::Common;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Core(Error::InvalidParams(_) | Error::LengthMismatch { .. }) => 2,
            CliError::Core(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Caps the global worker pool at `PERCOLATE_THREADS` when set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("PERCOLATE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PERCOLATE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

struct Loaded {
    params: ModelParams,
    cfg: SolverConfig,
    sink: Sink,
}

fn load(common: &Common, argv: &[String]) -> CliResult<Loaded> {
    let bytes = read(&common.config)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Usage(format!("{}: not UTF-8", common.config.display())))?;
    let mut params = ModelParams::from_json_str(&text)?;
    if let Some(n) = common.n_max {
        params = params.with_n_max(n);
        if params.pi.weights.iter().sum::<f64>() < 1.0 - 1e-9 {
            return Err(CliError::Usage(format!("--n-max {n} cuts off part of the entry distribution")));
        }
        params.validate()?;
    }
    let mut cfg = SolverConfig::default();
    if let Some(tol) = common.tol {
        if !(tol > 0.0) {
            return Err(CliError::Usage(format!("--tol must be positive, got {tol}")));
        }
        cfg.root_tol = tol;
        cfg.value_tol = tol;
    }
    Ok(Loaded { params, cfg, sink: Sink::new(argv, &bytes, common.seed) })
}

/// Parses `trigger:N`, `const:c` or `list:path` (a JSON array of efforts for precisions 1, 2, ...).
pub fn parse_policy(spec: &str, params: &ModelParams) -> CliResult<Policy> {
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("policy {spec:?} is not of the form kind:value")))?;
    let bad = |what: &str| CliError::Usage(format!("policy {spec:?}: {what}"));
    match kind {
        "trigger" => {
            let n: usize = arg.parse().map_err(|_| bad("trigger must be a nonnegative integer"))?;
            Ok(Policy::trigger(n, params))
        }
        "const" => {
            let c: f64 = arg.parse().map_err(|_| bad("effort must be a number"))?;
            Ok(Policy::constant(c, params)?)
        }
        "list" => {
            let path = Path::new(arg);
            let list: Vec<f64> = parse_json(path, &read(path)?)?;
            Ok(Policy::from_positive_efforts(&list, params)?)
        }
        _ => Err(bad("kind must be trigger, const or list")),
    }
}

fn required_policy(common: &Common, params: &ModelParams) -> CliResult<Policy> {
    let spec = common.policy.as_deref().ok_or_else(|| CliError::Usage("--policy is required".into()))?;
    parse_policy(spec, params)
}

#[derive(Serialize)]
struct StationaryOut<'a> {
    #[serde(flatten)]
    state: &'a MarketState,
    residual: f64,
    mass: f64,
    tail_mass: f64,
}

pub fn solve_stationary(common: &Common, argv: &[String]) -> CliResult<()> {
    let l = load(common, argv)?;
    let policy = required_policy(common, &l.params)?;
    let state = solve_stationary_with(&policy, &l.params, &l.cfg)?;
    let out = StationaryOut {
        residual: state.residual(&l.params),
        mass: state.mu.mass(),
        tail_mass: state.mu.tail_mass,
        state: &state,
    };
    l.sink.json(common.out.as_deref(), &out)
}

#[derive(Serialize)]
struct DynamicsRow {
    t: f64,
    n: usize,
    mu: f64,
}

pub fn simulate_dynamics(
    common: &Common,
    argv: &[String],
    t_end: Option<f64>,
    dt_out: f64,
    init: &str,
) -> CliResult<()> {
    let l = load(common, argv)?;
    let policy = required_policy(common, &l.params)?;
    let mu0 = match init.split_once(':') {
        None if init == "pi" => l.params.pi.clone(),
        Some(("point", n)) => {
            let n: usize = n.parse().map_err(|_| CliError::Usage(format!("--init {init:?}: bad precision")))?;
            if n > l.params.n_max {
                return Err(CliError::Usage(format!("--init point:{n} is beyond n_max")));
            }
            PrecisionMeasure::point_mass(n, l.params.n_max)
        }
        _ => return Err(CliError::Usage(format!("--init must be pi or point:n, got {init:?}"))),
    };
    let t_end = t_end.unwrap_or(50.0 / l.params.eta);
    let traj = integrate_with(&mu0, &policy, &l.params, t_end, dt_out, &l.cfg)?;
    let rows: Vec<DynamicsRow> = traj
        .times
        .iter()
        .zip(&traj.measures)
        .flat_map(|(&t, m)| m.weights.iter().enumerate().map(move |(n, &mu)| DynamicsRow { t, n, mu }))
        .collect();
    l.sink.csv(common.out.as_deref(), &rows)
}

#[derive(Serialize)]
struct BestResponseOut {
    value: Vec<f64>,
    tail_value: f64,
    policy: Vec<f64>,
    trigger: Option<usize>,
    optimal_triggers: Option<(usize, usize)>,
    n_bar: usize,
    b: f64,
    marginal_cost: f64,
    iterations: usize,
    final_sup_change: f64,
    contraction_bound: f64,
    max_observed_ratio: Option<f64>,
}

pub fn best_response(common: &Common, argv: &[String], market: Option<&Path>) -> CliResult<()> {
    let l = load(common, argv)?;
    let state: MarketState = match market {
        Some(path) => {
            let state: MarketState = parse_json(path, &read(path)?)?;
            if state.mu.len() != l.params.n_max + 1 {
                return Err(Error::LengthMismatch { expected: l.params.n_max + 1, found: state.mu.len() }.into());
            }
            state
        }
        None => solve_stationary_with(&required_policy(common, &l.params)?, &l.params, &l.cfg)?,
    };
    let br = solve_value_with(&state, &l.params, &l.cfg)?;
    let ms = minimal_search_test(&l.params)?;
    let out = BestResponseOut {
        value: br.value.values,
        tail_value: br.value.tail_value,
        policy: br.policy.efforts,
        trigger: br.trigger,
        optimal_triggers: br.optimal_triggers,
        n_bar: n_bar(&l.params),
        b: ms.b,
        marginal_cost: ms.marginal_cost,
        iterations: br.iterations,
        final_sup_change: br.final_sup_change,
        contraction_bound: br.contraction_bound,
        max_observed_ratio: br.max_observed_ratio,
    };
    l.sink.json(common.out.as_deref(), &out)
}

pub fn solve_equilibrium(common: &Common, argv: &[String], allow_convex: bool) -> CliResult<()> {
    let l = load(common, argv)?;
    let report = find_equilibria_with(&l.params, &l.cfg, allow_convex)?;
    eprintln!("equilibria {:?}, Pareto order {:?}", report.triggers(), report.pareto_order);
    l.sink.json(common.out.as_deref(), &report)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectionArg {
    ParetoBest,
    ParetoWorst,
    MatchedUp,
    MatchedDown,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::ParetoBest => Selection::ParetoBest,
            SelectionArg::ParetoWorst => Selection::ParetoWorst,
            SelectionArg::MatchedUp => Selection::MatchedUp,
            SelectionArg::MatchedDown => Selection::MatchedDown,
        }
    }
}

pub fn subsidy(
    common: &Common,
    argv: &[String],
    delta: Option<f64>,
    witness: bool,
    steps: usize,
    selection: SelectionArg,
) -> CliResult<()> {
    let l = load(common, argv)?;
    if witness {
        let w = find_subsidy_witness(&l.params, steps.max(2))?;
        eprintln!(
            "kappa {} delta {}: trigger {} -> {}",
            w.bisection.value, w.delta, w.outcome.baseline_trigger, w.outcome.treated_trigger
        );
        return l.sink.json(common.out.as_deref(), &w);
    }
    let delta = delta.ok_or_else(|| CliError::Usage("--delta is required".into()))?;
    let out = evaluate_subsidy(&l.params, delta, selection.into())?;
    l.sink.json(common.out.as_deref(), &out)
}

fn parse_candidates(raw: &str) -> CliResult<Vec<(f64, f64)>> {
    raw.split(',')
        .map(|pair| {
            let (a, b) =
                pair.split_once(':').ok_or_else(|| CliError::Usage(format!("candidate {pair:?} is not c_hi:rho")))?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad number {s:?}")));
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

pub fn educate(
    common: &Common,
    argv: &[String],
    m: Option<usize>,
    witness: bool,
    candidates: &str,
    selection: SelectionArg,
) -> CliResult<()> {
    let l = load(common, argv)?;
    if witness {
        let w = find_education_witness(&l.params, &parse_candidates(candidates)?)?;
        eprintln!(
            "c_hi {} rho {} kappa {}: equilibria {:?} -> {:?}",
            w.params.c_hi,
            w.params.rho,
            w.bisection.value,
            w.outcome.baseline.triggers(),
            w.outcome.treated.triggers()
        );
        return l.sink.json(common.out.as_deref(), &w);
    }
    let m = m.ok_or_else(|| CliError::Usage("--m is required".into()))?;
    let out = evaluate_education(&l.params, m, selection.into())?;
    l.sink.json(common.out.as_deref(), &out)
}

fn sim_config(common: &Common, params: &ModelParams, path: Option<&Path>) -> CliResult<SimConfig> {
    let mut cfg = match path {
        Some(p) => parse_json::<SimConfig>(p, &read(p)?)?,
        None => {
            let horizon = 50.0 / params.eta;
            SimConfig {
                population: 100_000,
                horizon,
                seed: 0,
                record_grid: horizon / 50.0,
                y_realization: None,
                burn_in: horizon / 2.0,
            }
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn montecarlo_run(common: &Common, argv: &[String], sim: Option<&Path>) -> CliResult<()> {
    let l = load(common, argv)?;
    let policy = required_policy(common, &l.params)?;
    let cfg = sim_config(common, &l.params, sim)?;
    let out = run(&policy, &l.params, &cfg)?;
    eprintln!("y = {}, {} matches", out.y, out.events.matches);
    l.sink.csv(common.out.as_deref(), &out.snapshots)
}

#[derive(Serialize)]
struct ValueOut {
    entry_precision: usize,
    lifetimes: usize,
    seed: u64,
    mean: f64,
    half_width: f64,
}

pub fn montecarlo_value(common: &Common, argv: &[String], sim: Option<&Path>, entry: usize) -> CliResult<()> {
    let l = load(common, argv)?;
    let policy = required_policy(common, &l.params)?;
    let cfg = sim_config(common, &l.params, sim)?;
    let (mean, half_width) = estimate_value(&policy, &l.params, &cfg, entry)?;
    let out = ValueOut { entry_precision: entry, lifetimes: cfg.population, seed: cfg.seed, mean, half_width };
    l.sink.json(common.out.as_deref(), &out)
}

pub fn counterexample(common: &Common, argv: &[String], c2: f64, eps: f64) -> CliResult<()> {
    let l = load(common, argv)?;
    let ex = effort_feedback_example(&l.params, c2, eps)?;
    let sign = if ex.derivative < 0.0 {
        "negative"
    } else if ex.derivative > 0.0 {
        "positive"
    } else {
        "zero"
    };
    eprintln!("d(C2 mu2)/dC1 = {:.6e} ({sign})", ex.derivative);
    l.sink.json(common.out.as_deref(), &ex)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepKind {
    Stationary,
    Equilibrium,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    #[serde(default)]
    eta: Vec<f64>,
    #[serde(default)]
    rho: Vec<f64>,
    #[serde(default)]
    c_lo: Vec<f64>,
    #[serde(default)]
    kappa: Vec<f64>,
    #[serde(default)]
    triggers: Vec<usize>,
}

#[derive(Serialize)]
struct SweepRow {
    eta: f64,
    rho: f64,
    c_lo: f64,
    kappa: f64,
    trigger: Option<usize>,
    c_bar: Option<f64>,
    residual: Option<f64>,
    n_bar: Option<usize>,
    equilibria: Option<String>,
    best: Option<usize>,
    status: String,
}

pub fn sweep(common: &Common, argv: &[String], grid_path: &Path, what: SweepKind) -> CliResult<()> {
    let l = load(common, argv)?;
    let grid: Grid = parse_json(grid_path, &read(grid_path)?)?;
    let base = &l.params;
    let base_kappa = match base.cost {
        CostSpec::Linear { kappa } => Some(kappa),
        _ => None,
    };
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let kappas = if grid.kappa.is_empty() {
        vec![base_kappa.unwrap_or(f64::NAN)]
    } else if base_kappa.is_none() {
        return Err(CliError::Usage("a kappa sweep needs a linear cost".into()));
    } else {
        grid.kappa.clone()
    };
    let mut scenarios = Vec::new();
    for &eta in &or(&grid.eta, base.eta) {
        for &rho in &or(&grid.rho, base.rho) {
            for &c_lo in &or(&grid.c_lo, base.c_lo) {
                for &kappa in &kappas {
                    let cost = if kappa.is_nan() { base.cost.clone() } else { CostSpec::Linear { kappa } };
                    scenarios.push(ModelParams { eta, rho, c_lo, cost, ..base.clone() });
                }
            }
        }
    }
    let kappa_of = |p: &ModelParams| match p.cost {
        CostSpec::Linear { kappa } => kappa,
        _ => f64::NAN,
    };
    let blank = |p: &ModelParams| SweepRow {
        eta: p.eta,
        rho: p.rho,
        c_lo: p.c_lo,
        kappa: kappa_of(p),
        trigger: None,
        c_bar: None,
        residual: None,
        n_bar: None,
        equilibria: None,
        best: None,
        status: "ok".into(),
    };
    let cfg = &l.cfg;
    let rows: Vec<SweepRow> = match what {
        SweepKind::Stationary => {
            let triggers = if grid.triggers.is_empty() { (0..=6).collect() } else { grid.triggers.clone() };
            let jobs: Vec<(&ModelParams, usize)> =
                scenarios.iter().flat_map(|p| triggers.iter().map(move |&n| (p, n))).collect();
            jobs.par_iter()
                .map(|&(p, n)| {
                    let mut row = SweepRow { trigger: Some(n), ..blank(p) };
                    match p.validate().and_then(|_| solve_stationary_with(&Policy::trigger(n, p), p, cfg)) {
                        Ok(st) => {
                            row.c_bar = Some(st.c_bar);
                            row.residual = Some(st.residual(p));
                        }
                        Err(e) => row.status = e.to_string(),
                    }
                    row
                })
                .collect()
        }
        SweepKind::Equilibrium => scenarios
            .par_iter()
            .map(|p| {
                let mut row = blank(p);
                match p.validate().and_then(|_| find_equilibria_with(p, cfg, false)) {
                    Ok(rep) => {
                        let best = rep.best();
                        row.n_bar = Some(rep.n_bar);
                        row.equilibria =
                            Some(rep.triggers().iter().map(|n| n.to_string()).collect::<Vec<_>>().join(";"));
                        row.best = Some(best.n);
                        row.c_bar = Some(best.state.c_bar);
                    }
                    Err(e) => row.status = e.to_string(),
                }
                row
            })
            .collect(),
    };
    l.sink.csv(common.out.as_deref(), &rows)
}
