//! Finite-population Monte Carlo of entry, exit, random matching and belief pooling,
//! plus single-agent lifetime sampling against a fixed market.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{cross_section_density_params, pool_posteriors, CostSpec, ModelParams, Policy};
use crate::stationary::{solve_stationary, MarketState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub precision: usize,
    pub posterior_mean: f64,
    pub entry_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub population: usize,
    pub horizon: f64,
    pub seed: u64,
    pub record_grid: f64,
    #[serde(default)]
    pub y_realization: Option<f64>,
    /// Lifetimes entering before this time are not used for value estimates.
    #[serde(default)]
    pub burn_in: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::InvalidParams("population must be at least 2".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParams(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.record_grid > 0.0) {
            return Err(Error::InvalidParams(format!("record_grid must be positive, got {}", self.record_grid)));
        }
        if !(self.burn_in >= 0.0) {
            return Err(Error::InvalidParams("burn_in must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Precision-`n` cell of a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub t: f64,
    pub n: usize,
    pub count: usize,
    pub mean_x: f64,
    pub var_x: f64,
}

/// Discounted lifetime utilities of agents that entered at one precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeTally {
    pub entry_precision: usize,
    pub count: usize,
    pub mean: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub renewals: u64,
    pub exits: u64,
    pub proposals: u64,
    pub matches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub y: f64,
    pub population: usize,
    pub snapshots: Vec<SnapshotRow>,
    pub final_agents: Vec<Agent>,
    pub lifetimes: Vec<LifetimeTally>,
    pub events: EventCounts,
}

impl SimOutput {
    pub fn snapshot_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.snapshots.iter().map(|r| r.t).collect();
        t.dedup();
        t
    }

    /// Empirical precision frequencies on `0..=n_max`, averaged over snapshots in `[from, to]`.
    pub fn mean_histogram(&self, n_max: usize, from: f64, to: f64) -> Vec<f64> {
        let mut h = vec![0.0; n_max + 1];
        let times: Vec<f64> = self.snapshot_times().into_iter().filter(|&t| t >= from && t <= to).collect();
        if times.is_empty() {
            return h;
        }
        for row in self.snapshots.iter().filter(|r| r.t >= from && r.t <= to && r.n <= n_max) {
            h[row.n] += row.count as f64;
        }
        let scale = (times.len() * self.population) as f64;
        h.iter_mut().for_each(|x| *x /= scale);
        h
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    agent: Agent,
    tracked: bool,
    entry_precision: usize,
    /// Time the current precision was reached.
    since: f64,
    /// Discounted cost paid since entry.
    cost: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    fn sample_var(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    fn half_width(&self) -> f64 {
        1.96 * (self.sample_var() / self.count as f64).sqrt()
    }
}

struct World<'a> {
    params: &'a ModelParams,
    policy: &'a Policy,
    cost: CostSpec,
    entry: WeightedIndex<f64>,
    y: f64,
}

impl World<'_> {
    fn fresh(&self, rng: &mut ChaCha8Rng, t: f64) -> Slot {
        let n = self.entry.sample(rng);
        let x = if n == 0 {
            0.0
        } else {
            let (m, v) = cross_section_density_params(n, self.y, self.params.rho);
            m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)
        };
        Slot {
            agent: Agent { precision: n, posterior_mean: x, entry_time: t },
            tracked: true,
            entry_precision: n,
            since: t,
            cost: 0.0,
        }
    }

    /// Adds the discounted cost of the current effort from `since` to `t`.
    fn settle(&self, s: &mut Slot, t: f64) {
        let k = self.cost.eval(self.policy.effort(s.agent.precision));
        if k != 0.0 {
            s.cost += k * discounted_span(self.params.r, s.since - s.agent.entry_time, t - s.agent.entry_time);
        }
        s.since = t;
    }

    fn realized_utility(&self, s: &Slot, t: f64) -> f64 {
        let age = t - s.agent.entry_time;
        (-self.params.r * age).exp() * self.params.exit_utility(s.agent.precision) - s.cost
    }
}

/// `∫_a^b e^{-r s} ds`.
fn discounted_span(r: f64, a: f64, b: f64) -> f64 {
    ((-r * a).exp() - (-r * b).exp()) / r
}

/// Event-driven simulation of a population of fixed size following `policy`.
///
/// Each agent is replaced by a fresh entrant at rate `η` and exits at rate `η′`.
/// When both rates differ, the unmatched part of the larger one either renews an
/// agent without recording an exit (its lifetime is dropped) or records an exit
/// while the agent's state carries on untracked.
pub fn run(policy: &Policy, params: &ModelParams, cfg: &SimConfig) -> Result<SimOutput> {
    params.validate()?;
    policy.validate(params)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let y = match cfg.y_realization {
        Some(y) => y,
        None => rng.sample(StandardNormal),
    };
    let entry =
        WeightedIndex::new(&params.pi.weights).map_err(|e| Error::InvalidParams(format!("entry distribution: {e}")))?;
    let world = World { params, policy, cost: params.effective_cost(), entry, y };

    let p = cfg.population;
    let mut slots: Vec<Slot> = (0..p).map(|_| world.fresh(&mut rng, 0.0)).collect();
    let c_max = policy.efforts.iter().fold(0.0f64, |a, &c| a.max(c));
    let turnover = params.eta.max(params.eta_prime);
    let shared = params.eta.min(params.eta_prime);
    let proposal_rate = c_max * c_max * (p as f64 - 1.0) / 2.0;
    let turnover_rate = turnover * p as f64;
    let total_rate = proposal_rate + turnover_rate;

    let mut tallies: Vec<Moments> = Vec::new();
    let mut events = EventCounts::default();
    let mut snapshots = Vec::new();
    let mut next_record = 0usize;
    let mut t = 0.0;

    loop {
        let dt = rng.sample::<f64, _>(Exp1) / total_rate;
        let t_next = t + dt;
        while (next_record as f64) * cfg.record_grid <= t_next.min(cfg.horizon) {
            record(&slots, next_record as f64 * cfg.record_grid, &mut snapshots);
            next_record += 1;
        }
        if t_next > cfg.horizon {
            break;
        }
        t = t_next;
        if rng.random::<f64>() * total_rate < turnover_rate {
            let i = rng.random_range(0..p);
            let u = rng.random::<f64>() * turnover;
            let s = &mut slots[i];
            if u < shared || params.eta < params.eta_prime {
                events.exits += 1;
                if s.tracked && s.agent.entry_time >= cfg.burn_in {
                    world.settle(s, t);
                    let v = world.realized_utility(s, t);
                    if tallies.len() <= s.entry_precision {
                        tallies.resize(s.entry_precision + 1, Moments::default());
                    }
                    tallies[s.entry_precision].push(v);
                }
                if u < shared {
                    events.renewals += 1;
                    *s = world.fresh(&mut rng, t);
                } else {
                    s.tracked = false;
                }
            } else {
                events.renewals += 1;
                *s = world.fresh(&mut rng, t);
            }
        } else {
            events.proposals += 1;
            let i = rng.random_range(0..p);
            let mut j = rng.random_range(0..p - 1);
            if j >= i {
                j += 1;
            }
            let ci = policy.effort(slots[i].agent.precision);
            let cj = policy.effort(slots[j].agent.precision);
            if rng.random::<f64>() * c_max * c_max < ci * cj {
                events.matches += 1;
                for k in [i, j] {
                    if slots[k].tracked {
                        world.settle(&mut slots[k], t);
                    } else {
                        slots[k].since = t;
                    }
                }
                let (a, b) = (slots[i].agent, slots[j].agent);
                let (x, n) = pool_posteriors(a.posterior_mean, a.precision, b.posterior_mean, b.precision, params.rho);
                for k in [i, j] {
                    slots[k].agent.precision = n;
                    slots[k].agent.posterior_mean = x;
                }
            }
        }
    }

    let lifetimes = tallies
        .iter()
        .enumerate()
        .filter(|(_, m)| m.count > 0)
        .map(|(n, m)| LifetimeTally { entry_precision: n, count: m.count, mean: m.mean(), half_width: m.half_width() })
        .collect();
    Ok(SimOutput {
        y,
        population: p,
        snapshots,
        final_agents: slots.iter().map(|s| s.agent).collect(),
        lifetimes,
        events,
    })
}

fn record(slots: &[Slot], t: f64, out: &mut Vec<SnapshotRow>) {
    let mut cells: Vec<Moments> = Vec::new();
    for s in slots {
        let n = s.agent.precision;
        if cells.len() <= n {
            cells.resize(n + 1, Moments::default());
        }
        cells[n].push(s.agent.posterior_mean);
    }
    for (n, m) in cells.iter().enumerate().filter(|(_, m)| m.count > 0) {
        out.push(SnapshotRow { t, n, count: m.count, mean_x: m.mean(), var_x: m.sample_var() });
    }
}

/// Comparison of one precision bin with the Gaussian cross-section prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorBinCheck {
    pub n: usize,
    /// Agents with distinct posterior means in the bin.
    pub distinct: usize,
    pub mean: f64,
    pub var: f64,
    pub predicted_mean: f64,
    pub predicted_var: f64,
    pub mean_interval: (f64, f64),
    pub var_interval: (f64, f64),
    pub pass: bool,
}

/// Checks posterior means by precision against `cross_section_density_params`.
///
/// Partners leave a meeting with identical posteriors, so repeated values are
/// counted once. Intervals have joint coverage `level` over all mean and variance
/// tests (Bonferroni). Bins with fewer than `min_count` distinct values are skipped.
pub fn posterior_moment_check(
    agents: &[Agent],
    y: f64,
    rho: f64,
    min_count: usize,
    level: f64,
) -> Vec<PosteriorBinCheck> {
    let mut bins: Vec<Vec<f64>> = Vec::new();
    for a in agents.iter().filter(|a| a.precision > 0) {
        if bins.len() <= a.precision {
            bins.resize(a.precision + 1, Vec::new());
        }
        bins[a.precision].push(a.posterior_mean);
    }
    let mut stats = Vec::new();
    for (n, xs) in bins.iter_mut().enumerate() {
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        if xs.len() >= min_count.max(2) {
            let mut m = Moments::default();
            xs.iter().for_each(|&x| m.push(x));
            stats.push((n, m));
        }
    }
    let alpha = (1.0 - level) / (2 * stats.len().max(1)) as f64;
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    stats
        .into_iter()
        .map(|(n, m)| {
            let (pm, pv) = cross_section_density_params(n, y, rho);
            let k = m.count as f64;
            let half = z * (pv / k).sqrt();
            let chi = ChiSquared::new(k - 1.0).expect("positive degrees of freedom");
            let var_interval =
                (pv * chi.inverse_cdf(alpha / 2.0) / (k - 1.0), pv * chi.inverse_cdf(1.0 - alpha / 2.0) / (k - 1.0));
            let mean_interval = (pm - half, pm + half);
            let (mean, var) = (m.mean(), m.sample_var());
            let pass =
                mean >= mean_interval.0 && mean <= mean_interval.1 && var >= var_interval.0 && var <= var_interval.1;
            PosteriorBinCheck {
                n,
                distinct: m.count,
                mean,
                var,
                predicted_mean: pm,
                predicted_var: pv,
                mean_interval,
                var_interval,
                pass,
            }
        })
        .collect()
}

/// Number of independent seeded batches used by [`estimate_value`].
pub const VALUE_BATCHES: usize = 64;

/// Mean and 95% half-width of the discounted lifetime utility of an entrant at
/// `entry_precision` who follows `policy` in the stationary market `policy` generates.
///
/// `cfg.population` lifetimes are sampled.
pub fn estimate_value(
    policy: &Policy,
    params: &ModelParams,
    cfg: &SimConfig,
    entry_precision: usize,
) -> Result<(f64, f64)> {
    let state = solve_stationary(policy, params)?;
    estimate_value_against(policy, &state, params, cfg, entry_precision)
}

/// As [`estimate_value`], with the agent's policy and the market given separately.
pub fn estimate_value_against(
    policy: &Policy,
    state: &MarketState,
    params: &ModelParams,
    cfg: &SimConfig,
    entry_precision: usize,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    policy.validate(params)?;
    let nu = state.weighted().weights;
    let d: f64 = nu.iter().skip(1).sum();
    let jumps = if d > 0.0 {
        let mut w = nu.clone();
        w[0] = 0.0;
        Some(WeightedIndex::new(&w).map_err(|e| Error::InvalidParams(format!("market jump law: {e}")))?)
    } else {
        None
    };
    let cost = params.effective_cost();
    let lifetimes = cfg.population;
    let per_batch = lifetimes.div_ceil(VALUE_BATCHES);
    let batches: Vec<Moments> = (0..VALUE_BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64);
            let count = per_batch.min(lifetimes.saturating_sub(b * per_batch));
            let mut m = Moments::default();
            for _ in 0..count {
                m.push(sample_lifetime(&mut rng, policy, params, &cost, d, jumps.as_ref(), entry_precision));
            }
            m
        })
        .collect();
    let total = batches.iter().fold(Moments::default(), |a, b| Moments {
        count: a.count + b.count,
        sum: a.sum + b.sum,
        sum_sq: a.sum_sq + b.sum_sq,
    });
    Ok((total.mean(), total.half_width()))
}

fn sample_lifetime(
    rng: &mut ChaCha8Rng,
    policy: &Policy,
    params: &ModelParams,
    cost: &CostSpec,
    d: f64,
    jumps: Option<&WeightedIndex<f64>>,
    entry_precision: usize,
) -> f64 {
    let (r, exit) = (params.r, params.eta_prime);
    let mut n = entry_precision;
    let mut age = 0.0;
    let mut paid = 0.0;
    loop {
        let c = policy.effort(n);
        let meet = if jumps.is_some() { c * d } else { 0.0 };
        let rate = meet + exit;
        let dt = rng.sample::<f64, _>(Exp1) / rate;
        let k = cost.eval(c);
        if k != 0.0 {
            paid += k * discounted_span(r, age, age + dt);
        }
        age += dt;
        if rng.random::<f64>() * rate < exit {
            return (-r * age).exp() * params.exit_utility(n) - paid;
        }
        n += jumps.expect("meetings need a jump law").sample(rng);
    }
}
