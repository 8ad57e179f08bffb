//! Symmetric trigger-policy equilibria.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::best_response::{minimal_search_test, n_bar, solve_value_with, BestResponse, MinimalSearch};
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::model::{CostSpec, ModelParams, Policy, ValueFunction};
use crate::stationary::{solve_stationary_with, MarketState};

/// `𝒩(N)`: the optimal triggers when everyone else uses trigger `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceEntry {
    pub n: usize,
    pub lo: usize,
    pub hi: usize,
    pub c_bar: f64,
}

impl CorrespondenceEntry {
    pub fn contains(&self, k: usize) -> bool {
        self.lo <= k && k <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub n: usize,
    pub state: MarketState,
    pub value: ValueFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// Sorted by trigger.
    pub equilibria: Vec<Equilibrium>,
    pub n_bar: usize,
    /// One row per canonical trigger `0..=n_bar`.
    pub correspondence: Vec<CorrespondenceEntry>,
    pub minimal_search: MinimalSearch,
    /// Equilibrium triggers from best to worst.
    pub pareto_order: Vec<usize>,
    /// True when a convex cost was handled by restricting agents to `{c_lo, c_hi}`.
    pub trigger_restricted: bool,
}

impl EquilibriumReport {
    pub fn triggers(&self) -> Vec<usize> {
        self.equilibria.iter().map(|e| e.n).collect()
    }

    pub fn get(&self, n: usize) -> Option<&Equilibrium> {
        self.equilibria.iter().find(|e| e.n == n)
    }

    /// Pareto-best equilibrium.
    pub fn best(&self) -> &Equilibrium {
        self.get(self.pareto_order[0]).expect("pareto order lists equilibria")
    }

    pub fn worst(&self) -> &Equilibrium {
        self.get(*self.pareto_order.last().expect("nonempty")).expect("pareto order lists equilibria")
    }
}

/// Triggers `k` with `k = 0` or `k − 1` reachable; any other trigger induces the
/// same behaviour on reachable states as the next smaller canonical one.
pub fn canonical_triggers(params: &ModelParams, up_to: usize) -> Vec<usize> {
    let reach = params.reachable_states();
    (0..=up_to.min(params.n_max)).filter(|&k| k == 0 || reach[k - 1]).collect()
}

/// Best response to the stationary market of trigger `n`.
pub fn respond_to_trigger(n: usize, params: &ModelParams, cfg: &SolverConfig) -> Result<(MarketState, BestResponse)> {
    let policy = Policy::trigger(n, params);
    let state = solve_stationary_with(&policy, params, cfg)?;
    let br = solve_value_with(&state, params, cfg)?;
    Ok((state, br))
}

/// The interval of optimal triggers against trigger `n`.
pub fn correspondence(n: usize, params: &ModelParams) -> Result<(usize, usize)> {
    let params = restrict_cost(params, false)?.0;
    let (_, br) = respond_to_trigger(n, &params, &SolverConfig::default())?;
    br.optimal_triggers.ok_or_else(|| Error::Certificate(format!("no optimal trigger against trigger {n}")))
}

/// Convex costs become the chord between `c_lo` and `c_hi` when `allow_convex` is set.
///
/// On `{c_lo, c_hi}` the chord agrees with `K` up to a constant, which shifts values
/// uniformly by that constant over `r + η′`.
fn restrict_cost(params: &ModelParams, allow_convex: bool) -> Result<(ModelParams, bool, f64)> {
    match &params.cost {
        CostSpec::Linear { .. } => Ok((params.clone(), false, 0.0)),
        CostSpec::TabulatedConvex { .. } if allow_convex => {
            log::warn!("convex cost: equilibrium search is restricted to trigger policies");
            let k = params.effective_cost();
            let slope = if params.c_hi > params.c_lo {
                (k.eval(params.c_hi) - k.eval(params.c_lo)) / (params.c_hi - params.c_lo)
            } else {
                k.right_slope(params.c_lo)
            };
            let offset = k.eval(params.c_lo) - slope * params.c_lo;
            let shift = -offset / (params.r + params.eta_prime);
            // the chord slope already includes the subsidy
            let mut p = params.clone();
            p.cost = CostSpec::Linear { kappa: slope.max(f64::MIN_POSITIVE) };
            p.subsidy = 0.0;
            Ok((p, true, shift))
        }
        CostSpec::TabulatedConvex { .. } => Err(Error::InvalidParams(
            "trigger equilibria need a linear cost; pass allow_convex to restrict to triggers".into(),
        )),
    }
}

pub fn find_equilibria(params: &ModelParams) -> Result<EquilibriumReport> {
    find_equilibria_with(params, &SolverConfig::default(), false)
}

/// Every trigger equilibrium in `0..=N̄`, with the full correspondence table.
pub fn find_equilibria_with(params: &ModelParams, cfg: &SolverConfig, allow_convex: bool) -> Result<EquilibriumReport> {
    params.validate()?;
    let (lp, restricted, shift) = restrict_cost(params, allow_convex)?;
    let nb = n_bar(&lp);
    let candidates = canonical_triggers(&lp, nb);
    let solved: Vec<(usize, MarketState, BestResponse)> = candidates
        .par_iter()
        .map(|&n| respond_to_trigger(n, &lp, cfg).map(|(s, b)| (n, s, b)))
        .collect::<Result<Vec<_>>>()?;

    let mut correspondence = Vec::with_capacity(solved.len());
    let mut equilibria = Vec::new();
    for (n, state, br) in solved {
        let (lo, hi) =
            br.optimal_triggers.ok_or_else(|| Error::Certificate(format!("no optimal trigger against trigger {n}")))?;
        let entry = CorrespondenceEntry { n, lo, hi, c_bar: state.c_bar };
        if entry.contains(n) {
            let mut value = br.value;
            if shift != 0.0 {
                value.values.iter_mut().for_each(|v| *v += shift);
                value.tail_value += shift;
            }
            let mut state = state;
            state.policy = Policy::trigger(n, params);
            equilibria.push(Equilibrium { n, state, value });
        }
        correspondence.push(entry);
    }
    if equilibria.is_empty() {
        return Err(Error::Certificate("descent found no fixed point of the trigger correspondence".into()));
    }
    let minimal_search = minimal_search_test(params)?;
    let mut report = EquilibriumReport {
        equilibria,
        n_bar: nb,
        correspondence,
        minimal_search,
        pareto_order: Vec::new(),
        trigger_restricted: restricted,
    };
    report.pareto_order = pareto_rank(&report)?;
    Ok(report)
}

/// Orders equilibria from best to worst and checks that higher triggers give
/// pointwise higher values.
pub fn pareto_rank(report: &EquilibriumReport) -> Result<Vec<usize>> {
    if report.equilibria.is_empty() {
        return Err(Error::InvalidParams("no equilibria to rank".into()));
    }
    let mut eqs: Vec<&Equilibrium> = report.equilibria.iter().collect();
    eqs.sort_by_key(|e| std::cmp::Reverse(e.n));
    for w in eqs.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        if let Some((n, gap)) =
            hi.value.values.iter().zip(&lo.value.values).map(|(a, b)| a - b).enumerate().find(|(_, d)| *d < -1e-10)
        {
            return Err(Error::Certificate(format!(
                "equilibrium {} is below equilibrium {} at n = {n} by {:e}",
                hi.n, lo.n, -gap
            )));
        }
    }
    Ok(eqs.iter().map(|e| e.n).collect())
}

/// First `i` where `max 𝒩` or `min 𝒩` decreases along the table.
pub fn correspondence_monotonicity_violation(table: &[CorrespondenceEntry]) -> Option<usize> {
    (1..table.len()).find(|&i| table[i].hi < table[i - 1].hi || table[i].lo < table[i - 1].lo)
}

/// `η′ (u(2s) − u(s)) c_H μ_s / (r + η′) − K′(c_L)` for the market in which only
/// precisions below `s + 1` search, where `s` is the lowest positive entry precision.
///
/// Positive values mean searching at `s` pays against that market.
pub fn search_margin(params: &ModelParams) -> Result<f64> {
    let s = (1..=params.n_max)
        .find(|&k| params.pi_at(k) > 0.0)
        .ok_or_else(|| Error::InvalidParams("entry distribution has no positive precision".into()))?;
    if 2 * s > params.n_max {
        return Err(Error::InvalidParams("n_max too small for the search margin".into()));
    }
    let state = solve_stationary_with(&Policy::trigger(s + 1, params), params, &SolverConfig::default())?;
    let gain = params.eta_prime * (params.exit_utility(2 * s) - params.exit_utility(s));
    Ok(gain * params.c_hi * state.mu.weights[s] / (params.r + params.eta_prime)
        - params.effective_cost().right_slope(params.c_lo))
}
