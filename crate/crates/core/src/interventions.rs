//! Search subsidies and public-signal education, with welfare comparisons.

use serde::{Deserialize, Serialize};

use crate::config::SolverConfig;
use crate::equilibrium::{find_equilibria_with, search_margin, Equilibrium, EquilibriumReport};
use crate::error::{Error, Result};
use crate::model::{CostSpec, ModelParams};

/// Subsidy `delta` on a linear cost, with the balanced-budget entry tax at the
/// Pareto-best treated equilibrium.
pub fn apply_subsidy(params: &ModelParams, delta: f64) -> Result<(ModelParams, f64)> {
    let CostSpec::Linear { kappa } = params.cost else {
        return Err(Error::InvalidParams("subsidies need a linear cost".into()));
    };
    if !(0.0..kappa).contains(&delta) {
        return Err(Error::InvalidParams(format!("subsidy {delta} must lie in [0, {kappa})")));
    }
    let treated = ModelParams { subsidy: delta, ..params.clone() };
    if delta == 0.0 {
        return Ok((treated, 0.0));
    }
    let report = find_equilibria_with(&treated, &SolverConfig::default(), false)?;
    let tax = subsidy_tax(delta, report.best().state.c_bar, params.eta);
    Ok((treated, tax))
}

/// `τ = δ C̄ / η`.
pub fn subsidy_tax(delta: f64, c_bar: f64, eta: f64) -> f64 {
    delta * c_bar / eta
}

/// Same scenario with `m` public signals at entry.
pub fn apply_education(params: &ModelParams, m: usize) -> ModelParams {
    ModelParams { public_signals: m, ..params.clone() }
}

/// Which equilibrium represents each report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ParetoBest,
    ParetoWorst,
    /// Baseline best; treated is the smallest trigger at or above it.
    MatchedUp,
    /// Baseline best; treated is the largest trigger at or below it.
    MatchedDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WelfareLabel {
    Positive,
    Negative,
    Neutral,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareEntry {
    pub n: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub baseline: EquilibriumReport,
    pub treated: EquilibriumReport,
    pub tax: f64,
    pub baseline_trigger: usize,
    pub treated_trigger: usize,
    /// Treated minus baseline entry value, net of tax, for each entry precision.
    pub welfare_delta: Vec<WelfareEntry>,
    pub selected_equilibrium_rule: Selection,
    pub label: WelfareLabel,
}

fn select(report: &EquilibriumReport, selection: Selection, anchor: usize) -> &Equilibrium {
    match selection {
        Selection::ParetoBest => report.best(),
        Selection::ParetoWorst => report.worst(),
        Selection::MatchedUp => {
            report.equilibria.iter().filter(|e| e.n >= anchor).min_by_key(|e| e.n).unwrap_or_else(|| report.best())
        }
        Selection::MatchedDown => {
            report.equilibria.iter().filter(|e| e.n <= anchor).max_by_key(|e| e.n).unwrap_or_else(|| report.worst())
        }
    }
}

/// Compares entry values at every precision in `entry_support`.
pub fn welfare_compare(
    baseline: &EquilibriumReport,
    treated: &EquilibriumReport,
    tax: f64,
    selection: Selection,
    entry_support: &[usize],
) -> Result<InterventionOutcome> {
    if baseline.equilibria.is_empty() || treated.equilibria.is_empty() {
        return Err(Error::InvalidParams("welfare comparison needs equilibria on both sides".into()));
    }
    let base_sel = match selection {
        Selection::ParetoWorst => baseline.worst(),
        _ => baseline.best(),
    };
    let treat_sel = select(treated, selection, base_sel.n);
    let welfare_delta: Vec<WelfareEntry> = entry_support
        .iter()
        .map(|&n| WelfareEntry { n, delta: treat_sel.value.get(n) - tax - base_sel.value.get(n) })
        .collect();
    let label = if welfare_delta.iter().all(|w| w.delta == 0.0) {
        WelfareLabel::Neutral
    } else if welfare_delta.iter().all(|w| w.delta > 0.0) {
        WelfareLabel::Positive
    } else if welfare_delta.iter().all(|w| w.delta < 0.0) {
        WelfareLabel::Negative
    } else {
        WelfareLabel::Ambiguous
    };
    Ok(InterventionOutcome {
        baseline: baseline.clone(),
        treated: treated.clone(),
        tax,
        baseline_trigger: base_sel.n,
        treated_trigger: treat_sel.n,
        welfare_delta,
        selected_equilibrium_rule: selection,
        label,
    })
}

/// Entry precisions with positive probability.
pub fn entry_support(params: &ModelParams) -> Vec<usize> {
    (0..=params.n_max).filter(|&n| params.pi_at(n) > 0.0).collect()
}

/// Baseline against subsidy `delta`, tax included.
pub fn evaluate_subsidy(params: &ModelParams, delta: f64, selection: Selection) -> Result<InterventionOutcome> {
    let cfg = SolverConfig::default();
    let baseline = find_equilibria_with(params, &cfg, false)?;
    let (treated_params, _) = apply_subsidy(params, 0.0)?;
    let treated_params = ModelParams { subsidy: delta, ..treated_params };
    let treated = find_equilibria_with(&treated_params, &cfg, false)?;
    let pick = select(&treated, selection, baseline.best().n);
    let tax = subsidy_tax(delta, pick.state.c_bar, params.eta);
    welfare_compare(&baseline, &treated, tax, selection, &entry_support(params))
}

/// Baseline against `m` public signals.
pub fn evaluate_education(params: &ModelParams, m: usize, selection: Selection) -> Result<InterventionOutcome> {
    let cfg = SolverConfig::default();
    let baseline = find_equilibria_with(params, &cfg, false)?;
    let treated = find_equilibria_with(&apply_education(params, m), &cfg, false)?;
    welfare_compare(&baseline, &treated, 0.0, selection, &entry_support(params))
}

/// Record of a one-dimensional search that placed the search margin in `band`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginBisection {
    pub knob: String,
    pub value: f64,
    pub margin: f64,
    pub band: (f64, f64),
    pub steps: usize,
}

/// Default band for the tuned margin.
pub const MARGIN_BAND: (f64, f64) = (-1e-4, 0.0);

/// Bisects `x` in `[neg, pos]` until `margin(x)` lies in `[band.0, band.1)`.
/// `margin(neg) < 0 ≤ margin(pos)` is required; the endpoints may be in either order.
pub fn bisect_margin<F>(knob: &str, mut margin: F, neg: f64, pos: f64, band: (f64, f64)) -> Result<MarginBisection>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut a, mut b) = (neg, pos);
    let (ma, mb) = (margin(a)?, margin(b)?);
    if !(ma < band.1 && mb >= band.1) {
        return Err(Error::BracketFailure { lo: a, hi: b, g_lo: ma, g_hi: mb });
    }
    let mut m_a = ma;
    for steps in 0..200 {
        if m_a >= band.0 && m_a < band.1 {
            return Ok(MarginBisection { knob: knob.into(), value: a, margin: m_a, band, steps });
        }
        let mid = 0.5 * (a + b);
        let mm = margin(mid)?;
        if mm < band.1 {
            a = mid;
            m_a = mm;
        } else {
            b = mid;
        }
    }
    Err(Error::NonConvergence { iterations: 200, last_change: (b - a).abs() })
}

/// Subsidy example: a scenario whose only equilibrium is no search, and a subsidy
/// that creates a search equilibrium every entrant prefers, tax included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsidyWitness {
    pub params: ModelParams,
    pub bisection: MarginBisection,
    pub delta: f64,
    pub deltas_tried: usize,
    pub outcome: InterventionOutcome,
}

/// Tunes `κ` so the search margin sits just below zero, then scans the subsidy grid
/// `δ = κ j / steps`, `j = 1..steps`, for a welfare-improving one.
pub fn find_subsidy_witness(base: &ModelParams, steps: usize) -> Result<SubsidyWitness> {
    let with_kappa = |k: f64| ModelParams { cost: CostSpec::Linear { kappa: k }, subsidy: 0.0, ..base.clone() };
    // margin is decreasing in κ and equals its value at κ → 0 minus κ
    let top = search_margin(&with_kappa(f64::MIN_POSITIVE))?;
    if top <= 0.0 {
        return Err(Error::Degenerate("searching never pays in the base scenario".into()));
    }
    let bisection = bisect_margin("kappa", |k| search_margin(&with_kappa(k)), 2.0 * top, top * 1e-3, MARGIN_BAND)?;
    let params = with_kappa(bisection.value);
    let baseline = find_equilibria_with(&params, &SolverConfig::default(), false)?;
    if baseline.triggers() != [0] {
        return Err(Error::Certificate(format!(
            "tuned baseline has equilibria {:?}, expected only no search",
            baseline.triggers()
        )));
    }
    for j in 1..steps {
        let delta = bisection.value * j as f64 / steps as f64;
        let outcome = evaluate_subsidy(&params, delta, Selection::ParetoBest)?;
        if outcome.treated_trigger > outcome.baseline_trigger && outcome.label == WelfareLabel::Positive {
            return Ok(SubsidyWitness { params, bisection, delta, deltas_tried: j, outcome });
        }
    }
    Err(Error::Certificate("no welfare-improving subsidy on the grid".into()))
}

/// Education example: search equilibria without public signals, only no search
/// with one, and every entrant worse off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EducationWitness {
    pub params: ModelParams,
    pub bisection: MarginBisection,
    pub outcome: InterventionOutcome,
    /// `(c_hi, rho)` pairs tried before the witness.
    pub tried: Vec<(f64, f64)>,
}

/// Block entry distribution: half the entrants with no signal, half with `n`.
pub fn block_entry(base: &ModelParams, n: usize) -> ModelParams {
    base.clone().with_pi(&[(0, 0.5), (n, 0.5)])
}

/// For each `(c_hi, ρ)` candidate, bisects `κ` so the one-signal search margin sits
/// just below zero, and accepts the first candidate where education hurts every entrant.
pub fn find_education_witness(base: &ModelParams, candidates: &[(f64, f64)]) -> Result<EducationWitness> {
    let mut tried = Vec::new();
    for &(c_hi, rho) in candidates {
        let with_kappa =
            |k: f64| ModelParams { c_hi, rho, c_lo: 0.0, cost: CostSpec::Linear { kappa: k }, ..base.clone() };
        let educated_margin = |k: f64| search_margin(&apply_education(&with_kappa(k), 1));
        let top = educated_margin(f64::MIN_POSITIVE)?;
        if top <= 0.0 {
            tried.push((c_hi, rho));
            continue;
        }
        let bisection = bisect_margin("kappa", educated_margin, 2.0 * top, top * 1e-3, MARGIN_BAND)?;
        let params = with_kappa(bisection.value);
        let outcome = evaluate_education(&params, 1, Selection::ParetoBest)?;
        if outcome.treated.triggers() == [0] && outcome.baseline_trigger >= 1 && outcome.label == WelfareLabel::Negative
        {
            return Ok(EducationWitness { params, bisection, outcome, tried });
        }
        tried.push((c_hi, rho));
    }
    Err(Error::Certificate(format!("no education witness among {} candidates", candidates.len())))
}
