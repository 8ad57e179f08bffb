//! Model primitives: scenario parameters, precision measures, effort policies,
//! and the Gaussian kernel behind belief pooling.
//!
//! All sequences are indexed by precision `n = 0..=n_max`. Index 0 holds agents
//! that entered without any private signal; they pool like everyone else and
//! search with effort `C_0` (see [`Policy`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-9;

/// Conditional variance of `Y` given `n` signals, each with correlation `rho` to `Y`.
///
/// `v(0) = 1` is the prior variance of the unit-variance target.
pub fn cond_variance(n: usize, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(variance(n, rho))
}

#[inline]
pub(crate) fn variance(n: usize, rho: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let r2 = rho * rho;
    (1.0 - r2) / (1.0 + r2 * (n as f64 - 1.0))
}

/// `γ_k = 1 + ρ²(k − 1)`, the weight normaliser of the pooling rule.
#[inline]
pub fn gamma_coeff(k: usize, rho: f64) -> f64 {
    1.0 + rho * rho * (k as f64 - 1.0)
}

/// Pools two posterior means built from disjoint signal sets.
///
/// Returns the posterior mean given all `n + m` signals and the pooled count.
/// A side with zero signals must carry the prior mean `0`.
pub fn pool_posteriors(x: f64, n: usize, y: f64, m: usize, rho: f64) -> (f64, usize) {
    let total = n + m;
    if total == 0 {
        return (0.0, 0);
    }
    let g = gamma_coeff(total, rho);
    let wx = if n == 0 { 0.0 } else { gamma_coeff(n, rho) / g };
    let wy = if m == 0 { 0.0 } else { gamma_coeff(m, rho) / g };
    (wx * x + wy * y, total)
}

/// Mean and variance of the posterior mean among precision-`n` agents given `Y = y`.
pub fn cross_section_density_params(n: usize, y: f64, rho: f64) -> (f64, f64) {
    let r2 = rho * rho;
    let nf = n as f64;
    let g = gamma_coeff(n, rho);
    (nf * r2 * y / g, nf * r2 * (1.0 - r2) / (g * g))
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("rho must lie in (0, 1), got {rho}")))
    }
}

/// Search-cost function `K` on `[c_lo, c_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSpec {
    /// `K(c) = κ c`.
    Linear { kappa: f64 },
    /// Piecewise-linear interpolation of `(c, K(c))` knots with nondecreasing slopes.
    TabulatedConvex { points: Vec<(f64, f64)> },
}

impl CostSpec {
    pub fn eval(&self, c: f64) -> f64 {
        match self {
            CostSpec::Linear { kappa } => kappa * c,
            CostSpec::TabulatedConvex { points } => {
                let i = segment_index(points, c);
                let (c0, k0) = points[i];
                let (c1, k1) = points[i + 1];
                k0 + (k1 - k0) * (c - c0) / (c1 - c0)
            }
        }
    }

    /// Right-hand derivative `K'(c+)`.
    pub fn right_slope(&self, c: f64) -> f64 {
        match self {
            CostSpec::Linear { kappa } => *kappa,
            CostSpec::TabulatedConvex { points } => {
                let mut i = segment_index(points, c);
                // at a knot the right slope belongs to the next segment
                if i + 2 < points.len() && c >= points[i + 1].0 {
                    i += 1;
                }
                slope(points, i)
            }
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, CostSpec::Linear { .. })
    }

    /// Knots strictly inside `(lo, hi)`; the only interior candidates for an optimum.
    pub(crate) fn interior_knots(&self, lo: f64, hi: f64) -> Vec<f64> {
        match self {
            CostSpec::Linear { .. } => Vec::new(),
            CostSpec::TabulatedConvex { points } => points.iter().map(|p| p.0).filter(|&c| c > lo && c < hi).collect(),
        }
    }

    /// Cost with a proportional subsidy `delta` removed from every unit of effort.
    pub fn subsidized(&self, delta: f64) -> CostSpec {
        if delta == 0.0 {
            return self.clone();
        }
        match self {
            CostSpec::Linear { kappa } => CostSpec::Linear { kappa: kappa - delta },
            CostSpec::TabulatedConvex { points } => {
                CostSpec::TabulatedConvex { points: points.iter().map(|&(c, k)| (c, k - delta * c)).collect() }
            }
        }
    }

    fn validate(&self, c_lo: f64, c_hi: f64) -> Result<()> {
        match self {
            CostSpec::Linear { kappa } => {
                if !(*kappa > 0.0) || !kappa.is_finite() {
                    return Err(Error::InvalidParams(format!("kappa must be positive, got {kappa}")));
                }
            }
            CostSpec::TabulatedConvex { points } => {
                if points.len() < 2 {
                    return Err(Error::InvalidParams("tabulated cost needs at least two knots".into()));
                }
                if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(Error::InvalidParams("cost knots must be strictly increasing in c".into()));
                }
                if points[0].0 > c_lo || points[points.len() - 1].0 < c_hi {
                    return Err(Error::InvalidParams(format!("cost knots must cover [{c_lo}, {c_hi}]")));
                }
                let slopes: Vec<f64> = (0..points.len() - 1).map(|i| slope(points, i)).collect();
                if slopes.iter().any(|&s| s < 0.0) {
                    return Err(Error::InvalidParams("tabulated cost must be nondecreasing".into()));
                }
                if slopes.windows(2).any(|w| w[1] < w[0] - 1e-12) {
                    return Err(Error::InvalidParams("tabulated cost must be convex".into()));
                }
            }
        }
        Ok(())
    }
}

fn slope(points: &[(f64, f64)], i: usize) -> f64 {
    (points[i + 1].1 - points[i].1) / (points[i + 1].0 - points[i].0)
}

fn segment_index(points: &[(f64, f64)], c: f64) -> usize {
    let upper = points.partition_point(|p| p.0 <= c);
    upper.saturating_sub(1).min(points.len() - 2)
}

/// Nonnegative sequence over precisions `0..=n_max`, plus mass that fell beyond the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionMeasure {
    /// `weights[n]` is the mass at precision `n`.
    pub weights: Vec<f64>,
    #[serde(default)]
    pub tail_mass: f64,
}

impl PrecisionMeasure {
    pub fn zeros(n_max: usize) -> Self {
        Self { weights: vec![0.0; n_max + 1], tail_mass: 0.0 }
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        Self { weights, tail_mass: 0.0 }
    }

    /// Unit mass at precision `n`.
    pub fn point_mass(n: usize, n_max: usize) -> Self {
        let mut m = Self::zeros(n_max);
        m.weights[n] = 1.0;
        m
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize) -> f64 {
        self.weights.get(n).copied().unwrap_or(0.0)
    }

    /// Mass inside the window.
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass() + self.tail_mass
    }

    /// `Σ_{i ≥ k} weights[i]` for every `k`.
    pub fn tail_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.weights.len()];
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate().rev() {
            acc += w;
            out[i] = acc;
        }
        out
    }

    /// Copy zero-padded or truncated to `n_max`.
    pub fn resized(&self, n_max: usize) -> Self {
        let mut weights = self.weights.clone();
        weights.resize(n_max + 1, 0.0);
        Self { weights, tail_mass: self.tail_mass }
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        let n = self.len().max(other.len());
        (0..n).map(|i| (self.get(i) - other.get(i)).abs()).sum()
    }

    /// Smallest precision carrying positive mass.
    pub fn min_support(&self) -> Option<usize> {
        self.weights.iter().position(|&w| w > 0.0)
    }
}

/// `μ^C_n = C_n μ_n`; its mass is the average effort `C̄`.
pub fn effort_weighted(mu: &PrecisionMeasure, c: &Policy) -> Result<PrecisionMeasure> {
    if mu.len() != c.efforts.len() {
        return Err(Error::LengthMismatch { expected: mu.len(), found: c.efforts.len() });
    }
    Ok(PrecisionMeasure::from_weights(mu.weights.iter().zip(&c.efforts).map(|(m, e)| m * e).collect()))
}

/// Search-effort sequence `C_0..C_{n_max}`; precisions beyond the window use `C_{n_max}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub efforts: Vec<f64>,
    /// `Some(N)` when the policy is the trigger `c_hi` below `N`, `c_lo` from `N` on.
    #[serde(default)]
    pub trigger: Option<usize>,
}

impl Policy {
    pub fn trigger(n: usize, params: &ModelParams) -> Self {
        let efforts = (0..=params.n_max).map(|k| if k < n { params.c_hi } else { params.c_lo }).collect();
        Self { efforts, trigger: Some(n) }
    }

    pub fn constant(c: f64, params: &ModelParams) -> Result<Self> {
        let p = Self { efforts: vec![c; params.n_max + 1], trigger: None };
        p.validate(params)?;
        Ok(p)
    }

    /// Builds a policy from efforts at precisions `1..`; `C_0` copies `C_1` and
    /// a short list is extended with its last entry.
    pub fn from_positive_efforts(list: &[f64], params: &ModelParams) -> Result<Self> {
        let Some(&first) = list.first() else {
            return Err(Error::InvalidParams("empty effort list".into()));
        };
        let last = list[list.len() - 1];
        let mut efforts = Vec::with_capacity(params.n_max + 1);
        efforts.push(first);
        for n in 1..=params.n_max {
            efforts.push(list.get(n - 1).copied().unwrap_or(last));
        }
        let p = Self { efforts, trigger: None };
        p.validate(params)?;
        Ok(p)
    }

    #[inline]
    pub fn effort(&self, n: usize) -> f64 {
        match self.efforts.get(n) {
            Some(&c) => c,
            None => *self.efforts.last().unwrap_or(&0.0),
        }
    }

    pub fn n_max(&self) -> usize {
        self.efforts.len().saturating_sub(1)
    }

    /// Smallest `N ≥ 1` with `C_n = C_N` for all `n ≥ N` inside the window.
    pub fn flat_tail_start(&self) -> usize {
        let last = self.efforts.len() - 1;
        let tail = self.efforts[last];
        let mut n = last;
        while n > 1 && self.efforts[n - 1] == tail {
            n -= 1;
        }
        n.max(1)
    }

    /// Pointwise `self ≥ other`.
    pub fn dominates(&self, other: &Policy) -> bool {
        self.efforts.len() == other.efforts.len() && self.efforts.iter().zip(&other.efforts).all(|(a, b)| a >= b)
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.efforts.len() != params.n_max + 1 {
            return Err(Error::LengthMismatch { expected: params.n_max + 1, found: self.efforts.len() });
        }
        let tol = 1e-12;
        if let Some((n, c)) =
            self.efforts.iter().enumerate().find(|(_, &c)| !(c >= params.c_lo - tol && c <= params.c_hi + tol))
        {
            return Err(Error::InvalidParams(format!("effort C_{n} = {c} outside [{}, {}]", params.c_lo, params.c_hi)));
        }
        if let Some(k) = self.trigger {
            let expanded = Policy::trigger(k, params);
            if expanded.efforts != self.efforts {
                return Err(Error::InvalidParams(format!("trigger {k} disagrees with the effort sequence")));
            }
        }
        Ok(())
    }
}

/// Indirect utility by precision, with the value used beyond the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub values: Vec<f64>,
    pub tail_value: f64,
}

impl ValueFunction {
    #[inline]
    pub fn get(&self, n: usize) -> f64 {
        self.values.get(n).copied().unwrap_or(self.tail_value)
    }

    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Exogenous parameters of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Entry (replacement) rate.
    pub eta: f64,
    /// Exit intensity.
    pub eta_prime: f64,
    /// Discount rate.
    pub r: f64,
    /// Correlation of each signal with `Y`.
    pub rho: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    pub cost: CostSpec,
    /// Entry precision distribution.
    #[serde(deserialize_with = "deserialize_pi")]
    pub pi: PrecisionMeasure,
    pub n_max: usize,
    #[serde(default)]
    pub public_signals: usize,
    /// Proportional search subsidy `δ`.
    #[serde(default)]
    pub subsidy: f64,
    /// Optional tabulated exit utility `u(0), u(1), ...`; held at its last value
    /// beyond the table. Defaults to `u(k) = -v(k)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_utility: Option<Vec<f64>>,
}

impl Default for ModelParams {
    fn default() -> Self {
        let n_max = 256;
        Self {
            eta: 1.0,
            eta_prime: 1.0,
            r: 0.1,
            rho: 0.5,
            c_lo: 0.0,
            c_hi: 1.0,
            cost: CostSpec::Linear { kappa: 0.1 },
            pi: PrecisionMeasure::point_mass(1, n_max),
            n_max,
            public_signals: 0,
            subsidy: 0.0,
            exit_utility: None,
        }
    }
}

impl ModelParams {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut p: ModelParams =
            serde_json::from_str(s).map_err(|e| Error::InvalidParams(format!("scenario JSON: {e}")))?;
        p.pi = p.pi.resized(p.n_max);
        p.validate()?;
        Ok(p)
    }

    /// Replaces `pi` with the given `(precision, probability)` pairs.
    pub fn with_pi(mut self, entries: &[(usize, f64)]) -> Self {
        let mut pi = PrecisionMeasure::zeros(self.n_max);
        for &(n, w) in entries {
            if n <= self.n_max {
                pi.weights[n] += w;
            }
        }
        self.pi = pi;
        self
    }

    /// Changes the window, keeping `pi`.
    pub fn with_n_max(mut self, n_max: usize) -> Self {
        self.n_max = n_max;
        self.pi = self.pi.resized(n_max);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        for (name, v) in [("eta", self.eta), ("eta_prime", self.eta_prime), ("r", self.r)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        check_rho(self.rho)?;
        if !(self.c_lo >= 0.0 && self.c_hi >= self.c_lo && self.c_hi.is_finite()) {
            return bad(format!("need 0 <= c_lo <= c_hi, got [{}, {}]", self.c_lo, self.c_hi));
        }
        if self.n_max == 0 {
            return bad("n_max must be positive".into());
        }
        self.cost.validate(self.c_lo, self.c_hi)?;
        if !(self.subsidy >= 0.0) {
            return bad(format!("subsidy must be nonnegative, got {}", self.subsidy));
        }
        if let CostSpec::Linear { kappa } = self.cost {
            if self.subsidy >= kappa {
                return bad(format!("subsidy {} must be below kappa {kappa}", self.subsidy));
            }
        }
        if self.pi.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return bad("pi has a negative or non-finite weight".into());
        }
        if self.pi.weights.iter().skip(self.n_max + 1).any(|&w| w > 0.0) {
            return bad("pi has support beyond n_max".into());
        }
        let total = self.pi.weights.iter().sum::<f64>();
        if (total - 1.0).abs() > PROB_TOL {
            return bad(format!("pi must sum to 1, sums to {total}"));
        }
        if let Some(u) = &self.exit_utility {
            validate_exit_utility(u)?;
        }
        Ok(())
    }

    #[inline]
    pub fn pi_at(&self, n: usize) -> f64 {
        self.pi.get(n)
    }

    /// Base exit utility `u(k)` before the public-signal shift.
    #[inline]
    pub fn base_utility(&self, k: usize) -> f64 {
        match &self.exit_utility {
            Some(t) => t.get(k).copied().unwrap_or(t[t.len() - 1]),
            None => -variance(k, self.rho),
        }
    }

    /// Exit utility at non-public precision `n`: `u(n + M)`.
    #[inline]
    pub fn exit_utility(&self, n: usize) -> f64 {
        self.base_utility(n + self.public_signals)
    }

    /// `ū = lim u(n)`.
    pub fn utility_limit(&self) -> f64 {
        match &self.exit_utility {
            Some(t) => t[t.len() - 1],
            None => 0.0,
        }
    }

    /// Cost faced by an agent after the proportional subsidy.
    pub fn effective_cost(&self) -> CostSpec {
        self.cost.subsidized(self.subsidy)
    }

    /// `sup_n |u|`, used by the value bound.
    pub fn utility_sup(&self) -> f64 {
        self.exit_utility(0).abs().max(self.utility_limit().abs())
    }

    /// Smallest precision an entrant can have.
    pub fn lowest_entry(&self) -> usize {
        self.pi.min_support().unwrap_or(0)
    }

    /// Precisions in `0..=n_max` that agents can ever hold: sums of entry draws.
    pub fn reachable_states(&self) -> Vec<bool> {
        let n = self.n_max;
        let support: Vec<usize> = (0..=n).filter(|&k| self.pi_at(k) > 0.0).collect();
        let mut reach = vec![false; n + 1];
        for &s in &support {
            reach[s] = true;
        }
        // a meeting adds the partner's precision, itself a reachable state
        let positive: Vec<usize> = support.iter().copied().filter(|&s| s > 0).collect();
        for k in 0..=n {
            if !reach[k] {
                continue;
            }
            for &s in &positive {
                if k + s <= n {
                    reach[k + s] = true;
                }
            }
        }
        reach
    }
}

fn validate_exit_utility(u: &[f64]) -> Result<()> {
    if u.len() < 2 {
        return Err(Error::InvalidParams("tabulated exit utility needs two entries".into()));
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParams("exit utility must be finite".into()));
    }
    if u.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParams("exit utility must be nondecreasing".into()));
    }
    if u.windows(3).any(|w| w[2] - w[1] > w[1] - w[0] + 1e-12) {
        return Err(Error::InvalidParams("exit utility must be concave".into()));
    }
    Ok(())
}

/// Accepts `pi` as a full measure object, a dense array indexed from precision 0,
/// or a sparse `{"precision": probability}` map.
fn deserialize_pi<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<PrecisionMeasure, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum PiRepr {
        Measure(PrecisionMeasure),
        Dense(Vec<f64>),
        Sparse(BTreeMap<String, f64>),
    }
    match PiRepr::deserialize(d)? {
        PiRepr::Measure(m) => Ok(m),
        PiRepr::Dense(w) => Ok(PrecisionMeasure::from_weights(w)),
        PiRepr::Sparse(map) => {
            let mut entries = Vec::with_capacity(map.len());
            for (k, v) in map {
                let n: usize =
                    k.trim().parse().map_err(|_| serde::de::Error::custom(format!("bad precision key {k:?}")))?;
                entries.push((n, v));
            }
            let len = entries.iter().map(|e| e.0).max().map_or(1, |m| m + 1);
            let mut w = vec![0.0; len];
            for (n, v) in entries {
                w[n] += v;
            }
            Ok(PrecisionMeasure::from_weights(w))
        }
    }
}
