//! Stationary precision measures for a fixed search policy.

use serde::{Deserialize, Serialize};

use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::model::{effort_weighted, ModelParams, Policy, PrecisionMeasure};
use crate::root::find_increasing_root;

/// Values below this are flushed to zero to keep the recursions out of subnormals.
pub(crate) const FLUSH: f64 = 1e-280;

/// A stationary measure together with the policy that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub mu: PrecisionMeasure,
    pub policy: Policy,
    /// Average effort `C̄ = Σ C_n μ_n`.
    pub c_bar: f64,
}

impl MarketState {
    /// Effort-weighted measure `μ^C`.
    pub fn weighted(&self) -> PrecisionMeasure {
        effort_weighted(&self.mu, &self.policy).expect("market state lengths agree")
    }

    /// Sup-norm residual of the stationary balance equation.
    pub fn residual(&self, params: &ModelParams) -> f64 {
        let nu = self.weighted();
        let conv = self_convolution(&nu.weights);
        (0..self.mu.len())
            .map(|n| (params.eta * (params.pi_at(n) - self.mu.weights[n]) + conv[n] - nu.weights[n] * self.c_bar).abs())
            .fold(0.0, f64::max)
    }
}

/// `Z_k = C_k / (η + C_k C̄)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZSequence {
    pub z: Vec<f64>,
}

impl ZSequence {
    pub fn new(policy: &Policy, c_bar: f64, eta: f64) -> Self {
        Self { z: policy.efforts.iter().map(|&c| c / (eta + c * c_bar)).collect() }
    }
}

/// Full self-convolution `(a * a)_n = Σ_{l=0}^{n} a_l a_{n-l}` on the window.
pub(crate) fn self_convolution(a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    // entries at or beyond `last` are zero
    let last = a.iter().rposition(|&x| x != 0.0).map_or(0, |i| i + 1);
    if last == 0 {
        return out;
    }
    out[0] = a[0] * a[0];
    for n in 1..a.len().min(2 * last - 1) {
        let lo = (n + 1).saturating_sub(last);
        let mut s = 0.0;
        for l in lo..=(n - 1) / 2 {
            s += a[l] * a[n - l];
        }
        s *= 2.0;
        if n % 2 == 0 {
            s += a[n / 2] * a[n / 2];
        }
        out[n] = s;
    }
    out
}

/// Candidate measure `μ̄(C̄)` from the forward recursion.
///
/// Returns `None` when the recursion has no nonnegative solution at this `C̄`,
/// which happens only for `C̄` below the admissible range.
pub fn candidate_measure_opt(c_bar: f64, policy: &Policy, params: &ModelParams) -> Option<PrecisionMeasure> {
    let len = params.n_max + 1;
    let eta = params.eta;
    let c = &policy.efforts;
    let mut mu = vec![0.0; len];
    let mut nu = vec![0.0; len];

    let pi0 = params.pi_at(0);
    let c0 = c[0];
    if pi0 > 0.0 {
        if c0 == 0.0 {
            mu[0] = pi0;
        } else {
            // smaller root of C_0² μ² − (η + C_0 C̄) μ + η π_0 = 0
            let b = eta + c0 * c_bar;
            let disc = b * b - 4.0 * c0 * c0 * eta * pi0;
            if disc < 0.0 {
                return None;
            }
            mu[0] = 2.0 * eta * pi0 / (b + disc.sqrt());
        }
        nu[0] = c0 * mu[0];
    }
    let two_nu0 = 2.0 * nu[0];
    let mut last_nu = 0usize;
    for k in 1..len {
        let ck = c[k];
        let denom = eta + ck * c_bar - two_nu0 * ck;
        if denom <= 0.0 {
            return None;
        }
        let mut conv = 0.0;
        if last_nu > 0 {
            let lo = k.saturating_sub(last_nu).max(1);
            let hi = (k - 1) / 2;
            for l in lo..=hi {
                conv += nu[l] * nu[k - l];
            }
            conv *= 2.0;
            if k % 2 == 0 && k / 2 <= last_nu {
                conv += nu[k / 2] * nu[k / 2];
            }
        }
        let mut m = (eta * params.pi_at(k) + conv) / denom;
        if m < FLUSH {
            m = 0.0;
        }
        if !m.is_finite() {
            return None;
        }
        mu[k] = m;
        nu[k] = ck * m;
        if nu[k] != 0.0 {
            last_nu = k;
        }
    }
    let mut pm = PrecisionMeasure::from_weights(mu);
    pm.tail_mass = (1.0 - pm.mass()).max(0.0);
    Some(pm)
}

/// Candidate measure `μ̄(C̄)`; a blown-up recursion is reported as an error.
pub fn candidate_measure(c_bar: f64, policy: &Policy, params: &ModelParams) -> Result<PrecisionMeasure> {
    if !(c_bar >= 0.0) {
        return Err(Error::InvalidParams(format!("c_bar must be nonnegative, got {c_bar}")));
    }
    policy.validate(params)?;
    candidate_measure_opt(c_bar, policy, params)
        .ok_or_else(|| Error::Degenerate(format!("candidate measure has no nonnegative solution at c_bar = {c_bar}")))
}

fn balance(c_bar: f64, policy: &Policy, params: &ModelParams) -> f64 {
    match candidate_measure_opt(c_bar, policy, params) {
        Some(mu) => c_bar - mu.weights.iter().zip(&policy.efforts).map(|(m, c)| m * c).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

/// Unique stationary measure of the policy.
pub fn solve_stationary(policy: &Policy, params: &ModelParams) -> Result<MarketState> {
    solve_stationary_with(policy, params, &SolverConfig::default())
}

pub fn solve_stationary_with(policy: &Policy, params: &ModelParams, cfg: &SolverConfig) -> Result<MarketState> {
    let hi = params.c_hi.max(policy.efforts.iter().cloned().fold(0.0, f64::max));
    solve_in_bracket(policy, params, cfg, 0.0, hi)
}

/// Same as [`solve_stationary_with`] with an explicit initial bracket; the upper
/// end is doubled until the balance function changes sign.
pub fn solve_in_bracket(
    policy: &Policy,
    params: &ModelParams,
    cfg: &SolverConfig,
    lo: f64,
    hi: f64,
) -> Result<MarketState> {
    params.validate()?;
    policy.validate(params)?;
    let g = |x: f64| balance(x, policy, params);
    let mut hi = hi.max(lo);
    let mut tries = 0;
    while g(hi) < 0.0 {
        tries += 1;
        if tries > 60 {
            return Err(Error::BracketFailure { lo, hi, g_lo: g(lo), g_hi: g(hi) });
        }
        hi = if hi == 0.0 { 1.0 } else { 2.0 * hi };
    }
    let mut lo = lo;
    if g(lo) > 0.0 {
        lo = 0.0;
    }
    let root = find_increasing_root(g, lo, hi, cfg.root_tol)?;
    let mu = candidate_measure_opt(root.x, policy, params)
        .ok_or_else(|| Error::Degenerate("candidate measure blew up at the root".into()))?;
    let state = MarketState { mu, policy: policy.clone(), c_bar: root.x };
    let residual = state.residual(params);
    if residual > cfg.residual_tol {
        return Err(Error::ResidualTooLarge { residual, tol: cfg.residual_tol });
    }
    let mass_err = (state.mu.mass() - 1.0).abs();
    if mass_err > cfg.mass_tol {
        log::warn!("stationary mass off by {mass_err:e} (tail {:e}); consider a larger n_max", state.mu.tail_mass);
    }
    Ok(state)
}

/// Ordering between two measures by tail sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    Equal,
    /// First argument dominates.
    First,
    /// Second argument dominates.
    Second,
    Crossing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FosdReport {
    pub relation: Dominance,
    /// First index where the first argument's tail sum falls short of the second's.
    pub first_violation: Option<usize>,
    /// Largest shortfall of the first argument's tail sums.
    pub max_shortfall: f64,
}

impl FosdReport {
    pub fn first_dominates(&self) -> bool {
        matches!(self.relation, Dominance::First | Dominance::Equal)
    }
}

/// Tail-sum comparison with absolute tolerance `1e-12`.
pub fn fosd_compare(a: &PrecisionMeasure, b: &PrecisionMeasure) -> Result<FosdReport> {
    fosd_compare_tol(a, b, 1e-12)
}

pub fn fosd_compare_tol(a: &PrecisionMeasure, b: &PrecisionMeasure, tol: f64) -> Result<FosdReport> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), found: b.len() });
    }
    let (ta, tb) = (a.tail_sums(), b.tail_sums());
    let mut first_violation = None;
    let mut reverse_violation = false;
    let mut max_shortfall = 0.0f64;
    for k in 0..ta.len() {
        let d = ta[k] - tb[k];
        if d < -tol {
            first_violation.get_or_insert(k);
        }
        if d > tol {
            reverse_violation = true;
        }
        max_shortfall = max_shortfall.max(-d);
    }
    let relation = match (first_violation.is_some(), reverse_violation) {
        (false, false) => Dominance::Equal,
        (false, true) => Dominance::First,
        (true, false) => Dominance::Second,
        (true, true) => Dominance::Crossing,
    };
    Ok(FosdReport { relation, first_violation, max_shortfall })
}

/// Closed-form and direct-series values of the generating function of `ν = μ^C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MgfPoint {
    pub x: f64,
    /// `None` when the closed form does not apply.
    pub closed_form: Option<f64>,
    pub series: f64,
}

/// Evaluates `m(x) = Σ ν_k x^k` directly and through the quadratic closed form.
///
/// The closed form needs a flat tail `C_n = C_N` for `n ≥ N` with `C_N > 0`
/// and no entry at precision 0. General `η` enters as `η π`.
pub fn mgf_oracle(state: &MarketState, params: &ModelParams, x_points: &[f64]) -> Result<Vec<MgfPoint>> {
    if x_points.iter().any(|&x| !(0.0..1.0).contains(&x)) {
        return Err(Error::InvalidParams("x points must lie in [0, 1)".into()));
    }
    let nu = state.weighted().weights;
    let big_n = state.policy.flat_tail_start();
    let z = ZSequence::new(&state.policy, state.c_bar, params.eta).z;
    let zn = z[big_n];
    let usable = zn > 0.0 && params.pi_at(0) == 0.0;
    if !usable {
        log::warn!("closed-form generating function unavailable; returning the direct series only");
    }
    let conv: Vec<f64> = (0..big_n).map(|i| (1..i).map(|l| nu[l] * nu[i - l]).sum()).collect();
    let eta = params.eta;
    Ok(x_points
        .iter()
        .map(|&x| {
            let series = horner(&nu, x);
            let closed_form = usable.then(|| {
                let mut big_m = 0.0;
                let mut xp = x;
                for i in 1..=params.n_max {
                    let pi = eta * params.pi_at(i);
                    big_m += xp * if i == 1 { z[1] * pi } else { zn * pi };
                    if i >= 2 && i < big_n {
                        big_m += xp * (z[i] - zn) * (pi + conv[i]);
                    }
                    xp *= x;
                    if xp < FLUSH {
                        break;
                    }
                }
                let disc = 1.0 - 4.0 * zn * big_m;
                2.0 * big_m / (1.0 + disc.max(0.0).sqrt())
            });
            MgfPoint { x, closed_form, series }
        })
        .collect())
}

fn horner(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Average efforts along a pointwise nondecreasing sequence of policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortMonotonicityReport {
    pub c_bars: Vec<f64>,
    /// First index `i` with `C̄_i < C̄_{i-1}` beyond tolerance.
    pub first_violation: Option<usize>,
}

pub fn average_effort_monotonicity_check(grid: &[Policy], params: &ModelParams) -> Result<EffortMonotonicityReport> {
    for (i, w) in grid.windows(2).enumerate() {
        if !w[1].dominates(&w[0]) {
            return Err(Error::InvalidParams(format!("policy {} does not dominate policy {i}", i + 1)));
        }
    }
    let c_bars = grid.iter().map(|p| solve_stationary(p, params).map(|s| s.c_bar)).collect::<Result<Vec<_>>>()?;
    let first_violation = (1..c_bars.len()).find(|&i| c_bars[i] < c_bars[i - 1] - 1e-10);
    Ok(EffortMonotonicityReport { c_bars, first_violation })
}

/// Effort feedback with efforts only at precisions 1 and 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackExample {
    pub c2: f64,
    /// `d(C_2 μ_2)/dC_1` at `C_1 = C_2`, by central differences.
    pub derivative: f64,
    pub step: f64,
    pub eps: f64,
    /// `μ^C` for `C_1 = C_2 − ε` against `μ^C` for `C_1 = C_2`.
    pub fosd: FosdReport,
    /// Smallest `k` with the reduced tail sums at least the baseline ones from `k` on.
    pub dominates_from: usize,
    pub reduced: MarketState,
    pub baseline: MarketState,
}

/// Policy `(C_1, C_2, 0, 0, ...)` with `C_0 = C_1`.
pub fn two_level_policy(c1: f64, c2: f64, params: &ModelParams) -> Result<Policy> {
    Policy::from_positive_efforts(&[c1, c2, 0.0], params)
}

/// Measures how `C_2 μ_2` responds to `C_1` near `C_1 = C_2`, and compares the
/// effort-weighted measures with `C_1` lowered by `eps`.
pub fn effort_feedback_example(params: &ModelParams, c2: f64, eps: f64) -> Result<FeedbackExample> {
    let step: f64 = 1e-5;
    if !(c2 - step.max(eps) >= params.c_lo && c2 + step <= params.c_hi) {
        return Err(Error::InvalidParams(format!("C_2 = {c2} leaves no room for the perturbations")));
    }
    let weight_at_two = |c1: f64| -> Result<f64> {
        let st = solve_stationary(&two_level_policy(c1, c2, params)?, params)?;
        Ok(st.weighted().get(2))
    };
    let derivative = (weight_at_two(c2 + step)? - weight_at_two(c2 - step)?) / (2.0 * step);
    let baseline = solve_stationary(&two_level_policy(c2, c2, params)?, params)?;
    let reduced = solve_stationary(&two_level_policy(c2 - eps, c2, params)?, params)?;
    let (a, b) = (reduced.weighted(), baseline.weighted());
    let fosd = fosd_compare(&a, &b)?;
    let (ta, tb) = (a.tail_sums(), b.tail_sums());
    let dominates_from = (0..ta.len()).rev().take_while(|&k| ta[k] >= tb[k] - 1e-12).last().unwrap_or(ta.len());
    Ok(FeedbackExample { c2, derivative, step, eps, fosd, dominates_from, reduced, baseline })
}
