//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p percolate-cli --test acceptance`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use percolate_core::best_response::{n_bar, solve_value};
use percolate_core::dynamics::integrate;
use percolate_core::equilibrium::{correspondence_monotonicity_violation, find_equilibria, search_margin};
use percolate_core::interventions::{block_entry, find_education_witness, find_subsidy_witness, MARGIN_BAND};
use percolate_core::model::{CostSpec, ModelParams, Policy, PrecisionMeasure};
use percolate_core::simulator::{estimate_value, posterior_moment_check, run, SimConfig};
use percolate_core::stationary::{effort_feedback_example, fosd_compare, mgf_oracle, solve_stationary};
use rayon::prelude::*;

/// Criteria expected to print FAIL; the suite still fails if any other criterion does.
const KNOWN_FAILURES: &[u32] = &[4];

const ETAS: [f64; 3] = [0.5, 1.0, 2.0];
const RHOS: [f64; 3] = [0.3, 0.5, 0.8];
const C_LOS: [f64; 2] = [0.0, 0.1];

fn scenario(eta: f64, rho: f64, c_lo: f64) -> ModelParams {
    ModelParams { eta, rho, c_lo, ..ModelParams::default() }.with_n_max(256).with_pi(&[(1, 0.6), (2, 0.3), (3, 0.1)])
}

fn grid() -> Vec<ModelParams> {
    let mut out = Vec::new();
    for eta in ETAS {
        for rho in RHOS {
            for c_lo in C_LOS {
                out.push(scenario(eta, rho, c_lo));
            }
        }
    }
    out
}

fn tag(p: &ModelParams) -> String {
    format!("eta={} rho={} c_lo={}", p.eta, p.rho, p.c_lo)
}

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(problems: Vec<String>, summary: String) -> Self {
        if problems.is_empty() {
            Outcome { pass: true, detail: summary }
        } else {
            let shown: Vec<_> = problems.iter().take(3).cloned().collect();
            Outcome { pass: false, detail: format!("{summary}; {} problem(s): {}", problems.len(), shown.join(" | ")) }
        }
    }
}

fn within(elapsed: Duration, limit: Option<Duration>, problems: &mut Vec<String>) {
    if let Some(limit) = limit {
        if elapsed > limit {
            problems.push(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()));
        }
    }
}

fn c1_stationary_residual() -> Outcome {
    let start = Instant::now();
    let jobs: Vec<(ModelParams, usize)> =
        grid().into_iter().flat_map(|p| (1..=6).map(move |n| (p.clone(), n))).collect();
    let mut problems = Vec::new();
    let mut worst = (0.0f64, 0.0f64);
    for (p, n) in &jobs {
        let st = match solve_stationary(&Policy::trigger(*n, p), p) {
            Ok(st) => st,
            Err(e) => {
                problems.push(format!("{} N={n}: {e}", tag(p)));
                continue;
            }
        };
        let mass_err = (st.mu.mass() - 1.0).abs();
        let res = st.residual(p);
        worst = (worst.0.max(mass_err), worst.1.max(res));
        if mass_err > 1e-8 || res >= 1e-10 {
            problems.push(format!("{} N={n}: mass error {mass_err:e}, residual {res:e}", tag(p)));
        }
    }
    within(start.elapsed(), Some(Duration::from_secs(5)), &mut problems);
    Outcome::new(
        problems,
        format!("{} solves, max mass error {:.1e}, max residual {:.1e}", jobs.len(), worst.0, worst.1),
    )
}

fn c2_stability() -> Outcome {
    let start = Instant::now();
    let jobs: Vec<(ModelParams, usize)> = grid()
        .into_iter()
        .flat_map(|p| (1..=6).map(move |n| (p.clone(), n)))
        .filter(|(p, n)| p.eta >= p.c_hi * Policy::trigger(*n, p).effort(p.n_max))
        .collect();
    let results: Vec<Result<f64, String>> = jobs
        .par_iter()
        .map(|(p, n)| {
            let policy = Policy::trigger(*n, p);
            let target = solve_stationary(&policy, p).map_err(|e| e.to_string())?.mu;
            let mut worst = 0.0f64;
            for start in [p.pi.clone(), PrecisionMeasure::point_mass(5, p.n_max)] {
                let traj = integrate(&start, &policy, p, 50.0 / p.eta, 50.0 / p.eta).map_err(|e| e.to_string())?;
                worst = worst.max(traj.last().l1_distance(&target));
            }
            Ok(worst)
        })
        .collect();
    let mut problems = Vec::new();
    let mut worst = 0.0f64;
    for ((p, n), r) in jobs.iter().zip(results) {
        match r {
            Ok(d) if d < 1e-6 => worst = worst.max(d),
            Ok(d) => problems.push(format!("{} N={n}: l1 distance {d:e}", tag(p))),
            Err(e) => problems.push(format!("{} N={n}: {e}", tag(p))),
        }
    }
    within(start.elapsed(), Some(Duration::from_secs(30)), &mut problems);
    Outcome::new(problems, format!("{} scenarios x 2 starts, max l1 distance {worst:.1e}", jobs.len()))
}

fn c3_fosd() -> Outcome {
    let mut problems = Vec::new();
    let mut pairs = 0;
    for p in grid() {
        let weighted: Vec<PrecisionMeasure> =
            (0..=8).map(|n| solve_stationary(&Policy::trigger(n, &p), &p).unwrap().weighted()).collect();
        for hi in 0..=8 {
            for lo in 0..hi {
                pairs += 1;
                let rep = fosd_compare(&weighted[hi], &weighted[lo]).unwrap();
                if !rep.first_dominates() {
                    problems.push(format!(
                        "{} N={hi} vs M={lo}: {:?} at k={:?}",
                        tag(&p),
                        rep.relation,
                        rep.first_violation
                    ));
                }
            }
        }
    }
    Outcome::new(problems, format!("{pairs} pairs"))
}

fn c4_counterexample() -> Outcome {
    let p =
        ModelParams { c_lo: 0.0, ..ModelParams::default() }.with_n_max(256).with_pi(&[(1, 0.2), (2, 0.6), (3, 0.2)]);
    let ex = effort_feedback_example(&p, 0.5, 1e-3).unwrap();
    let mut problems = Vec::new();
    if !(ex.derivative < 0.0) {
        problems.push(format!("derivative {:e} is not negative", ex.derivative));
    }
    if !ex.fosd.first_dominates() {
        problems.push(format!(
            "reduced policy does not dominate: {:?}, first violation k={:?} (C_bar {:.6} vs {:.6}), dominance from k={}",
            ex.fosd.relation, ex.fosd.first_violation, ex.reduced.c_bar, ex.baseline.c_bar, ex.dominates_from
        ));
    }
    Outcome::new(problems, format!("d(C2 mu2)/dC1 = {:.4e}", ex.derivative))
}

fn c5_mgf() -> Outcome {
    let mut problems = Vec::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for p in grid().into_iter().filter(|p| p.c_lo > 0.0) {
        for n in 1..=6 {
            let st = solve_stationary(&Policy::trigger(n, &p), &p).unwrap();
            for pt in mgf_oracle(&st, &p, &[0.1, 0.3, 0.5, 0.7]).unwrap() {
                checked += 1;
                match pt.closed_form {
                    Some(c) => {
                        let err = (c - pt.series).abs();
                        worst = worst.max(err);
                        if err > 1e-9 {
                            problems.push(format!("{} N={n} x={}: {err:e}", tag(&p), pt.x));
                        }
                    }
                    None => problems.push(format!("{} N={n}: no closed form", tag(&p))),
                }
            }
        }
    }
    Outcome::new(problems, format!("{checked} points, max error {worst:.1e}"))
}

fn exit_variance(n: usize, rho: f64) -> f64 {
    if n == 0 {
        1.0
    } else {
        (1.0 - rho * rho) / (1.0 + rho * rho * (n as f64 - 1.0))
    }
}

fn c6_value_iteration() -> Outcome {
    const SHAPE_TOL: f64 = 1e-9;
    let mut problems = Vec::new();
    let mut max_gap = f64::NEG_INFINITY;
    let mut solves = 0;
    for p in grid() {
        let bound_n = n_bar(&p);
        for n in 0..=6 {
            let st = solve_stationary(&Policy::trigger(n, &p), &p).unwrap();
            let br = solve_value(&st, &p).unwrap();
            solves += 1;
            let who = format!("{} market N={n}", tag(&p));
            let bound = p.c_hi * st.c_bar / (p.c_hi * st.c_bar + p.r + p.eta_prime);
            if let Some(ratio) = br.max_observed_ratio {
                max_gap = max_gap.max(ratio - bound);
                if ratio > bound + 1e-12 {
                    problems.push(format!("{who}: ratio {ratio} > bound {bound}"));
                }
            }
            let v = &br.value.values;
            let d: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
            if let Some(k) = d.iter().position(|&x| x < -SHAPE_TOL) {
                problems.push(format!("{who}: V decreases at {k}"));
            }
            if let Some(k) = d.windows(2).position(|w| w[1] > w[0] + SHAPE_TOL) {
                problems.push(format!("{who}: V differences increase at {k}"));
            }
            let e = &br.policy.efforts;
            if e.iter().any(|&c| c != p.c_lo && c != p.c_hi) {
                problems.push(format!("{who}: interior effort"));
            }
            let switch = (1..e.len()).find(|&k| e[k] == p.c_lo).unwrap_or(e.len());
            if e[switch.max(1)..].iter().any(|&c| c != p.c_lo) {
                problems.push(format!("{who}: not trigger-shaped"));
            }
            if e[bound_n.max(1)..].iter().any(|&c| c != p.c_lo) {
                problems.push(format!("{who}: effort above c_lo at or beyond N_bar={bound_n}"));
            }
        }
    }
    let spot = ModelParams::default();
    let kappa = 0.1;
    let oracle = (1..=spot.n_max)
        .filter(|&n| spot.c_hi * spot.eta_prime * (spot.r + spot.eta_prime) * exit_variance(n, spot.rho) >= kappa)
        .max()
        .unwrap_or(0);
    let got = n_bar(&spot);
    if got != 30 || oracle != 30 {
        problems.push(format!("N_bar spot value {got}, scan oracle {oracle}, expected 30"));
    }
    Outcome::new(problems, format!("{solves} solves, max ratio minus bound {max_gap:.1e}, N_bar spot {got}"))
}

fn c7_equilibria() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();
    let mut counts = Vec::new();
    for p in grid() {
        let rep = match find_equilibria(&p) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{}: {e}", tag(&p)));
                continue;
            }
        };
        counts.push(rep.equilibria.len());
        if rep.equilibria.is_empty() {
            problems.push(format!("{}: no equilibrium", tag(&p)));
        }
        if let Some(k) = correspondence_monotonicity_violation(&rep.correspondence) {
            problems.push(format!("{}: correspondence not monotone at {k}", tag(&p)));
        }
        if p.c_lo == 0.0 && !rep.triggers().contains(&0) {
            problems.push(format!("{}: N=0 missing from {:?}", tag(&p), rep.triggers()));
        }
    }
    let w = ModelParams { cost: CostSpec::Linear { kappa: 0.02 }, ..scenario(1.0, 0.5, 0.0) };
    let margin = search_margin(&w).unwrap();
    let rep = find_equilibria(&w).unwrap();
    let best = rep.best();
    if !(margin > 0.0) {
        problems.push(format!("witness margin {margin} not strict"));
    }
    match rep.get(0) {
        Some(none) if best.n >= 1 => {
            let shortfall =
                none.value.values.iter().zip(&best.value.values).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max);
            if shortfall > 1e-10 {
                problems.push(format!("N={} falls short of N=0 by {shortfall:e}", best.n));
            }
        }
        _ => problems.push(format!("witness equilibria {:?}, best {}", rep.triggers(), best.n)),
    }
    within(start.elapsed(), Some(Duration::from_secs(120)), &mut problems);
    Outcome::new(
        problems,
        format!(
            "{} scenarios, equilibria per scenario {}..{}; witness kappa=0.02 margin {margin:.4e}, equilibria {:?}",
            counts.len(),
            counts.iter().min().unwrap_or(&0),
            counts.iter().max().unwrap_or(&0),
            rep.triggers()
        ),
    )
}

fn c8_interventions() -> Outcome {
    let mut problems = Vec::new();
    let base = ModelParams { c_lo: 0.0, ..ModelParams::default() }.with_n_max(64);
    let mut summary = Vec::new();
    match find_subsidy_witness(&block_entry(&base, 2), 40) {
        Ok(w) => {
            let o = &w.outcome;
            let m = w.bisection.margin;
            if !(m >= MARGIN_BAND.0 && m < MARGIN_BAND.1) {
                problems.push(format!("subsidy bisection margin {m} outside band"));
            }
            if o.treated_trigger <= o.baseline_trigger {
                problems.push(format!("subsidy trigger {} -> {}", o.baseline_trigger, o.treated_trigger));
            }
            if o.welfare_delta.iter().any(|e| !(e.delta > 0.0)) {
                problems.push(format!("subsidy welfare {:?}", o.welfare_delta));
            }
            summary.push(format!(
                "subsidy kappa={:.4} delta={:.4}: N {} -> {}",
                w.bisection.value, w.delta, o.baseline_trigger, o.treated_trigger
            ));
        }
        Err(e) => problems.push(format!("subsidy witness: {e}")),
    }
    match find_education_witness(&block_entry(&base, 5), &[(2.0, 0.3), (3.0, 0.3), (5.0, 0.3)]) {
        Ok(w) => {
            let o = &w.outcome;
            if o.treated.triggers() != [0] || o.baseline_trigger == 0 {
                problems.push(format!(
                    "education equilibria {:?} -> {:?}",
                    o.baseline.triggers(),
                    o.treated.triggers()
                ));
            }
            if o.welfare_delta.iter().any(|e| !(e.delta < 0.0)) {
                problems.push(format!("education welfare {:?}", o.welfare_delta));
            }
            summary.push(format!(
                "education c_hi={} rho={} kappa={:.4}: N {} -> {:?}",
                w.params.c_hi,
                w.params.rho,
                w.bisection.value,
                o.baseline_trigger,
                o.treated.triggers()
            ));
        }
        Err(e) => problems.push(format!("education witness: {e}")),
    }
    Outcome::new(problems, summary.join("; "))
}

fn c9_monte_carlo() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();
    let p = ModelParams { cost: CostSpec::Linear { kappa: 0.05 }, ..scenario(1.0, 0.5, 0.1) };
    let trigger = find_equilibria(&p).unwrap().best().n;
    let policy = Policy::trigger(trigger, &p);
    let state = solve_stationary(&policy, &p).unwrap();
    let horizon = 50.0 / p.eta;
    let population = 100_000;
    let cfg = SimConfig {
        population,
        horizon,
        seed: 1,
        record_grid: horizon / 50.0,
        y_realization: None,
        burn_in: horizon / 2.0,
    };
    let out = run(&policy, &p, &cfg).unwrap();
    let hist = out.mean_histogram(p.n_max, horizon / 2.0, horizon);
    let pf = population as f64;
    let mut worst_z = 0.0f64;
    for (n, (&h, &mu)) in hist.iter().zip(&state.mu.weights).enumerate() {
        if mu >= 10.0 / pf {
            let z = (h - mu).abs() / (mu / pf).sqrt();
            worst_z = worst_z.max(z);
            if z > 3.0 {
                problems.push(format!("histogram n={n}: {h} vs {mu}"));
            }
        }
    }
    let bins = posterior_moment_check(&out.final_agents, out.y, p.rho, 100, 0.95);
    if bins.is_empty() {
        problems.push("no posterior bins".into());
    }
    for b in bins.iter().filter(|b| !b.pass) {
        problems.push(format!("posterior bin n={}: mean {} var {}", b.n, b.mean, b.var));
    }
    let v1 = solve_value(&state, &p).unwrap().value.get(1);
    let (mean, hw) = estimate_value(&policy, &p, &cfg, 1).unwrap();
    if (mean - v1).abs() > hw {
        problems.push(format!("value {mean} +- {hw} vs {v1}"));
    }
    within(start.elapsed(), Some(Duration::from_secs(180)), &mut problems);
    Outcome::new(
        problems,
        format!(
            "trigger {trigger}, max histogram z {worst_z:.2}, {} posterior bins, V_1 {v1:.5} vs {mean:.5} +- {hw:.5}",
            bins.len()
        ),
    )
}

fn percolate(args: &[&str], dir: &Path) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_percolate"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scenario_json = serde_json::to_string(&ModelParams {
        cost: CostSpec::Linear { kappa: 0.05 },
        ..scenario(1.0, 0.5, 0.1).with_n_max(128)
    })
    .unwrap();
    std::fs::write(dir.path().join("s.json"), scenario_json).unwrap();
    std::fs::write(
        dir.path().join("sim.json"),
        r#"{"population":5000,"horizon":10,"seed":11,"record_grid":1,"burn_in":5}"#,
    )
    .unwrap();
    std::fs::write(dir.path().join("g.json"), r#"{"eta":[0.5,1],"rho":[0.3,0.8],"c_lo":[0.1]}"#).unwrap();
    let runs: [&[&str]; 5] = [
        &["solve-equilibrium", "--config", "s.json", "--out", "OUT"],
        &["montecarlo", "run", "--config", "s.json", "--policy", "trigger:4", "--sim", "sim.json", "--out", "OUT"],
        &["montecarlo", "value", "--config", "s.json", "--policy", "trigger:4", "--sim", "sim.json", "--out", "OUT"],
        &["sweep", "--config", "s.json", "--grid", "g.json", "--out", "OUT"],
        &["simulate-dynamics", "--config", "s.json", "--policy", "trigger:3", "--t-end", "5", "--out", "OUT"],
    ];
    let mut problems = Vec::new();
    for args in runs {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let name = format!("out{rep}");
            let argv: Vec<&str> = args.iter().map(|&a| if a == "OUT" { name.as_str() } else { a }).collect();
            percolate(&argv, dir.path());
            let mut bytes = std::fs::read(dir.path().join(&name)).unwrap();
            // the pointer to the manifest names the output file
            if let Ok(text) = String::from_utf8(bytes.clone()) {
                bytes = text.replace(&format!("{name}.manifest.json"), "").into_bytes();
            }
            outputs.push(bytes);
        }
        if outputs[0] != outputs[1] {
            problems.push(format!("{} output differs between runs", args[..2].join(" ")));
        }
    }
    Outcome::new(problems, format!("{} commands run twice", runs.len()))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "stationary residual", c1_stationary_residual),
        (2, "stability", c2_stability),
        (3, "FOSD in trigger", c3_fosd),
        (4, "effort feedback counterexample", c4_counterexample),
        (5, "generating function", c5_mgf),
        (6, "value iteration", c6_value_iteration),
        (7, "equilibrium algorithm", c7_equilibria),
        (8, "interventions", c8_interventions),
        (9, "Monte Carlo", c9_monte_carlo),
        (10, "determinism", c10_determinism),
    ];
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} [{:.1}s] {name}: {}", start.elapsed().as_secs_f64(), outcome.detail);
        if !outcome.pass && !KNOWN_FAILURES.contains(&id) {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
