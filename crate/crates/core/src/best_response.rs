//! A single agent's optimal search effort against a fixed market.

use serde::{Deserialize, Serialize};

use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::model::{CostSpec, ModelParams, Policy, ValueFunction};
use crate::stationary::{solve_stationary, MarketState};

/// Market quantities an individual agent faces.
#[derive(Debug, Clone)]
pub(crate) struct Environment {
    /// `μ^C_m` for `m ≥ 1`, cut at its last nonzero entry; index 0 unused.
    nu: Vec<f64>,
    /// `D = Σ_{m≥1} μ^C_m`, the rate of informative meetings per unit effort.
    d: f64,
    /// `η′ u_n` for `n ≤ 2 n_max`.
    eu: Vec<f64>,
    /// Shift `η′(u_k − u_{n_max})/(r+η′)` added to `V_{n_max}` beyond the window.
    beyond: Vec<f64>,
    disc: f64,
    n_max: usize,
    c_lo: f64,
    c_hi: f64,
    cost: CostSpec,
}

impl Environment {
    pub(crate) fn new(state: &MarketState, params: &ModelParams) -> Self {
        let w = state.weighted().weights;
        let last = w.iter().rposition(|&x| x > 0.0).unwrap_or(0);
        let mut nu = w[..=last].to_vec();
        nu[0] = 0.0;
        let d = nu.iter().skip(1).sum();
        Self::from_parts(nu, d, params)
    }

    fn from_parts(nu: Vec<f64>, d: f64, params: &ModelParams) -> Self {
        let n_max = params.n_max;
        let disc = params.r + params.eta_prime;
        let cost = params.effective_cost();
        let eu: Vec<f64> = (0..=2 * n_max + 1).map(|k| params.eta_prime * params.exit_utility(k)).collect();
        let beyond = eu.iter().map(|e| (e - eu[n_max]) / disc).collect();
        Self { nu, d, eu, beyond, disc, n_max, c_lo: params.c_lo, c_hi: params.c_hi, cost }
    }

    /// Contraction modulus `c_H D / (c_H D + r + η′)`.
    pub(crate) fn modulus(&self) -> f64 {
        self.c_hi * self.d / (self.c_hi * self.d + self.disc)
    }

    #[inline]
    fn ext(&self, v: &[f64], k: usize) -> f64 {
        if k <= self.n_max {
            v[k]
        } else {
            v[self.n_max] + self.beyond[k]
        }
    }

    /// `Y_n = Σ_{m≥1} V_{n+m} μ^C_m`.
    fn expected_next(&self, v: &[f64]) -> Vec<f64> {
        (0..=self.n_max)
            .map(|n| self.nu.iter().enumerate().skip(1).map(|(m, w)| self.ext(v, n + m) * w).sum())
            .collect()
    }

    #[inline]
    fn objective(&self, n: usize, y: f64, c: f64) -> f64 {
        (self.eu[n] - self.cost.eval(c) + c * y) / (c * self.d + self.disc)
    }

    /// Maximiser over `[c_lo, c_hi]`, ties going to the larger effort.
    fn argmax(&self, n: usize, y: f64, tie: f64) -> (f64, f64) {
        match &self.cost {
            CostSpec::Linear { .. } => {
                let lo = self.objective(n, y, self.c_lo);
                let hi = self.objective(n, y, self.c_hi);
                if hi >= lo - tie {
                    (self.c_hi, hi)
                } else {
                    (self.c_lo, lo)
                }
            }
            CostSpec::TabulatedConvex { .. } => {
                let c = self.convex_argmax(n, y);
                (c, self.objective(n, y, c))
            }
        }
    }

    /// Bisection on the first-order sign `h`, which is constant on each cost segment
    /// and nonincreasing across segments.
    fn convex_argmax(&self, n: usize, y: f64) -> f64 {
        let mut knots = vec![self.c_lo];
        knots.extend(self.cost.interior_knots(self.c_lo, self.c_hi));
        knots.push(self.c_hi);
        if self.c_hi == self.c_lo {
            return self.c_lo;
        }
        let h = |i: usize| {
            let (a, b) = (knots[i], knots[i + 1]);
            let s = (self.cost.eval(b) - self.cost.eval(a)) / (b - a);
            let intercept = self.cost.eval(a) - s * a;
            self.d * intercept - self.disc * s + (y * self.disc - self.eu[n] * self.d)
        };
        // first segment on which the objective stops increasing
        let (mut lo, mut hi) = (0usize, knots.len() - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if h(mid) >= 0.0 {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        knots[lo]
    }

    fn apply(&self, v: &[f64], tie: f64) -> (Vec<f64>, Vec<f64>) {
        let y = self.expected_next(v);
        let mut out = vec![0.0; v.len()];
        let mut efforts = vec![0.0; v.len()];
        for n in 0..=self.n_max {
            let (c, val) = self.argmax(n, y[n], tie);
            out[n] = val;
            efforts[n] = c;
        }
        (out, efforts)
    }

    fn tail_value(&self, params: &ModelParams) -> f64 {
        (params.eta_prime * params.utility_limit() - self.cost.eval(self.c_lo)) / self.disc
    }
}

/// One application of the Bellman operator.
pub fn bellman_operator(v: &ValueFunction, state: &MarketState, params: &ModelParams) -> Result<ValueFunction> {
    if v.values.len() != params.n_max + 1 {
        return Err(Error::LengthMismatch { expected: params.n_max + 1, found: v.values.len() });
    }
    let env = Environment::new(state, params);
    let (values, _) = env.apply(&v.values, SolverConfig::default().indifference_tol);
    Ok(ValueFunction { values, tail_value: env.tail_value(params) })
}

/// Contraction modulus of the Bellman operator for this market.
pub fn contraction_bound(state: &MarketState, params: &ModelParams) -> f64 {
    Environment::new(state, params).modulus()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    pub value: ValueFunction,
    pub policy: Policy,
    /// Largest optimal trigger; present under linear cost.
    pub trigger: Option<usize>,
    /// All optimal triggers `[lo, hi]`; present under linear cost.
    pub optimal_triggers: Option<(usize, usize)>,
    /// Per-unit gain from searching, `Y_n − D V_n − κ`; present under linear cost.
    pub switching: Option<Vec<f64>>,
    pub iterations: usize,
    pub final_sup_change: f64,
    pub contraction_bound: f64,
    /// Largest ratio of successive sup-changes while the changes exceed `1e-3`.
    pub max_observed_ratio: Option<f64>,
}

/// Successive changes below this are dominated by roundoff in a ratio estimate.
const RATIO_FLOOR: f64 = 1e-3;

pub fn solve_value(state: &MarketState, params: &ModelParams) -> Result<BestResponse> {
    solve_value_with(state, params, &SolverConfig::default())
}

pub fn solve_value_with(state: &MarketState, params: &ModelParams, cfg: &SolverConfig) -> Result<BestResponse> {
    params.validate()?;
    if state.mu.len() != params.n_max + 1 {
        return Err(Error::LengthMismatch { expected: params.n_max + 1, found: state.mu.len() });
    }
    let env = Environment::new(state, params);
    let q = env.modulus();
    let threshold = if q > 0.0 { cfg.value_tol * (1.0 - q) / q } else { f64::INFINITY };
    let cap =
        if q > 0.0 { ((cfg.value_tol.ln() / q.ln()).ceil() as usize + 50).min(cfg.max_value_iterations) } else { 2 };

    let mut v: Vec<f64> = (0..=params.n_max).map(|n| env.eu[n] / env.disc).collect();
    let mut prev_change: Option<f64> = None;
    let mut max_ratio: Option<f64> = None;
    let mut iterations = 0;
    let mut change;
    loop {
        let (next, _) = env.apply(&v, cfg.indifference_tol);
        change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        iterations += 1;
        if let Some(p) = prev_change {
            if p >= RATIO_FLOOR {
                let r = change / p;
                max_ratio = Some(max_ratio.map_or(r, |m: f64| m.max(r)));
            }
        }
        prev_change = Some(change);
        if change < threshold || change == 0.0 {
            break;
        }
        if iterations >= cap {
            return Err(Error::NonConvergence { iterations, last_change: change });
        }
    }

    check_value_shape(&v, &env)?;

    let y = env.expected_next(&v);
    let tail_value = env.tail_value(params);
    let value = ValueFunction { values: v, tail_value };
    let mut br = BestResponse {
        value,
        policy: Policy { efforts: Vec::new(), trigger: None },
        trigger: None,
        optimal_triggers: None,
        switching: None,
        iterations,
        final_sup_change: change,
        contraction_bound: q,
        max_observed_ratio: max_ratio,
    };

    match params.effective_cost() {
        CostSpec::Linear { kappa } => {
            let z: Vec<f64> = (0..=params.n_max).map(|n| y[n] - env.d * br.value.values[n] - kappa).collect();
            let reach = params.reachable_states();
            let (lo, hi) = optimal_trigger_interval(&z, &reach, cfg.indifference_tol)
                .ok_or_else(|| Error::Certificate("optimal policy is not trigger-shaped under linear cost".into()))?;
            br.policy = Policy::trigger(hi, params);
            br.trigger = Some(hi);
            br.optimal_triggers = Some((lo, hi));
            br.switching = Some(z);
        }
        CostSpec::TabulatedConvex { .. } => {
            let efforts: Vec<f64> = (0..=params.n_max).map(|n| env.argmax(n, y[n], cfg.indifference_tol).0).collect();
            if efforts.windows(2).any(|w| w[1] > w[0] + 1e-12) {
                log::warn!("extracted effort is not monotone decreasing in precision");
            }
            br.policy = Policy { efforts, trigger: None };
        }
    }
    Ok(br)
}

/// Monotone value and decreasing search premium `V_n − η′u_n/(r+η′)`.
fn check_value_shape(v: &[f64], env: &Environment) -> Result<()> {
    let tol = 1e-9;
    for n in 0..v.len() - 1 {
        if v[n + 1] < v[n] - tol {
            return Err(Error::Certificate(format!("value decreases at n = {n}: {} -> {}", v[n], v[n + 1])));
        }
        let d0 = v[n] - env.eu[n] / env.disc;
        let d1 = v[n + 1] - env.eu[n + 1] / env.disc;
        if d1 > d0 + tol {
            return Err(Error::Certificate(format!("search premium increases at n = {n}: {d0} -> {d1}")));
        }
    }
    Ok(())
}

/// Triggers `k` (in `0..=z.len()`) whose policy is optimal on every reachable state:
/// `z_j ≥ −tol` below `k` and `z_j ≤ tol` from `k` on. `None` if there is none.
/// Only canonical triggers (`k = 0` or `k − 1` reachable) are reported.
pub fn optimal_trigger_interval(z: &[f64], reachable: &[bool], tol: f64) -> Option<(usize, usize)> {
    let len = z.len();
    let mut ok_below = vec![true; len + 1];
    for k in 1..=len {
        ok_below[k] = ok_below[k - 1] && (!reachable[k - 1] || z[k - 1] >= -tol);
    }
    let mut ok_above = vec![true; len + 1];
    for k in (0..len).rev() {
        ok_above[k] = ok_above[k + 1] && (!reachable[k] || z[k] <= tol);
    }
    // triggers that differ only on unreachable states are reported by the smallest one
    let valid: Vec<usize> = (0..=len).filter(|&k| ok_below[k] && ok_above[k] && (k == 0 || reachable[k - 1])).collect();
    Some((*valid.first()?, *valid.last()?))
}

/// Upper bound on optimal triggers; `n_max` when `K′(c_L) = 0`.
///
/// The larger of the printed bound `max{n : c_H η′ (r+η′)(ū − u(n)) ≥ K′(c_L)}` and
/// one more than `max{n : c_H η′/(r+η′) (ū − u(n)) ≥ K′(c_L)}`, which is what the
/// switching-value estimate supports.
pub fn n_bar(params: &ModelParams) -> usize {
    let k1 = params.effective_cost().right_slope(params.c_lo);
    if k1 <= 0.0 {
        log::warn!("K'(c_lo) = 0: no finite trigger bound, using n_max");
        return params.n_max;
    }
    let disc = params.r + params.eta_prime;
    let ubar = params.utility_limit();
    let gap = |n: usize| ubar - params.exit_utility(n);
    let scan = |factor: f64, from: usize| -> Option<usize> {
        let mut last = None;
        for n in from..=params.n_max {
            if params.c_hi * params.eta_prime * factor * gap(n) >= k1 {
                last = Some(n);
            } else {
                break;
            }
        }
        last
    };
    let printed = scan(disc, 1).unwrap_or(0);
    let corrected = scan(1.0 / disc, 0).map_or(0, |n| n + 1);
    let bound = printed.max(corrected);
    if bound >= params.n_max {
        log::warn!("trigger bound reaches n_max = {}", params.n_max);
    }
    bound.min(params.n_max)
}

/// Outcome of the minimal-search equilibrium test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalSearch {
    /// Marginal benefit of search at the lowest entry precision.
    pub b: f64,
    pub marginal_cost: f64,
    pub is_equilibrium: bool,
    /// Value of an agent at `c_L` when everyone searches at `c_L`.
    pub value: ValueFunction,
    pub neumann_terms: usize,
}

/// Whether everyone searching at `c_L` is an equilibrium: `K′(c_L) ≥ B`.
pub fn minimal_search_test(params: &ModelParams) -> Result<MinimalSearch> {
    params.validate()?;
    let marginal_cost = params.effective_cost().right_slope(params.c_lo);
    let base = Policy::constant(params.c_lo, params)?;
    let state = solve_stationary(&base, params)?;
    let env = Environment::new(&state, params);
    let (value, terms) = minimal_value(&env, params);
    let s0 = params.lowest_entry();
    let b: f64 = env.nu.iter().enumerate().skip(1).map(|(m, w)| (env.ext(&value, s0 + m) - value[s0]) * w).sum();
    Ok(MinimalSearch {
        b,
        marginal_cost,
        is_equilibrium: marginal_cost >= b,
        value: ValueFunction { values: value, tail_value: env.tail_value(params) },
        neumann_terms: terms,
    })
}

/// Value of constant effort `c_L` by the Neumann series `Σ_j A^j f`.
fn minimal_value(env: &Environment, params: &ModelParams) -> (Vec<f64>, usize) {
    let c = env.c_lo;
    let denom = env.disc + c * env.d;
    let k = env.cost.eval(c);
    let gain = c / denom;
    let len = params.n_max + 1;
    // beyond the window the value is V_{n_max} plus a fixed shift
    let f: Vec<f64> = (0..len)
        .map(|n| {
            let outside: f64 = env
                .nu
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(m, _)| n + m > params.n_max)
                .map(|(m, w)| env.beyond[n + m] * w)
                .sum();
            (env.eu[n] - k) / denom + gain * outside
        })
        .collect();
    let mut total = f.clone();
    let mut term = f;
    let mut terms = 1;
    while terms < 100_000 {
        let next: Vec<f64> = (0..len)
            .map(|n| {
                gain * env.nu.iter().enumerate().skip(1).map(|(m, w)| term[(n + m).min(params.n_max)] * w).sum::<f64>()
            })
            .collect();
        let size = next.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for (t, x) in total.iter_mut().zip(&next) {
            *t += x;
        }
        term = next;
        terms += 1;
        if size < 1e-14 {
            break;
        }
    }
    (total, terms)
}
