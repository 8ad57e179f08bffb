//! Forward integration of the precision-distribution ODE.

use serde::{Deserialize, Serialize};

use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Policy, PrecisionMeasure};
use crate::stationary::FLUSH;

/// Effort-weighted entries below this are left out of the convolution.
const CONV_CUT: f64 = 1e-40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub measures: Vec<PrecisionMeasure>,
    /// Mass inside the window at each recorded time.
    pub mass_series: Vec<f64>,
    /// Largest negative entry clipped to zero.
    pub max_clip: f64,
    pub steps: usize,
    pub rejected: usize,
}

impl Trajectory {
    pub fn last(&self) -> &PrecisionMeasure {
        self.measures.last().expect("trajectory has at least one snapshot")
    }
}

/// Time derivative of `μ` under the policy.
///
/// Mass missing from a unit total is taken to sit beyond the window, searching at
/// `C_{n_max}`; meetings with it move agents out of the window.
pub fn rhs(mu: &PrecisionMeasure, policy: &Policy, params: &ModelParams) -> Result<Vec<f64>> {
    if mu.len() != policy.efforts.len() {
        return Err(Error::LengthMismatch { expected: policy.efforts.len(), found: mu.len() });
    }
    let mut out = vec![0.0; mu.len()];
    let mut nu = vec![0.0; mu.len()];
    eval_rhs(&mu.weights, &policy.efforts, params, &mut nu, &mut out);
    Ok(out)
}

fn eval_rhs(mu: &[f64], c: &[f64], params: &ModelParams, nu: &mut [f64], out: &mut [f64]) {
    let mut c_bar = 0.0;
    let mut mass = 0.0;
    let mut last = 0;
    for (i, (m, e)) in mu.iter().zip(c).enumerate() {
        let v = m * e;
        nu[i] = v;
        c_bar += v;
        mass += m;
        if v > CONV_CUT {
            last = i + 1;
        }
    }
    c_bar += c[c.len() - 1] * (1.0 - mass).max(0.0);
    let eta = params.eta;
    for n in 0..mu.len() {
        let mut conv = 0.0;
        if last > 0 && n < 2 * last - 1 {
            let lo = (n + 1).saturating_sub(last);
            if n > 0 {
                for l in lo..=(n - 1) / 2 {
                    conv += nu[l] * nu[n - l];
                }
            }
            conv *= 2.0;
            if n % 2 == 0 {
                conv += nu[n / 2] * nu[n / 2];
            }
        }
        out[n] = eta * (params.pi_at(n) - mu[n]) + conv - nu[n] * c_bar;
    }
}

// Dormand-Prince 5(4) tableau
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

/// Integrates from `mu0` to `t_end`, recording every `dt_out` and at `t_end`.
pub fn integrate(
    mu0: &PrecisionMeasure,
    policy: &Policy,
    params: &ModelParams,
    t_end: f64,
    dt_out: f64,
) -> Result<Trajectory> {
    integrate_with(mu0, policy, params, t_end, dt_out, &SolverConfig::default())
}

pub fn integrate_with(
    mu0: &PrecisionMeasure,
    policy: &Policy,
    params: &ModelParams,
    t_end: f64,
    dt_out: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    if !(t_end > 0.0) || !(dt_out > 0.0) {
        return Err(Error::InvalidParams(format!("need t_end > 0 and dt_out > 0, got {t_end}, {dt_out}")));
    }
    params.validate()?;
    policy.validate(params)?;
    let len = params.n_max + 1;
    if mu0.len() != len {
        return Err(Error::LengthMismatch { expected: len, found: mu0.len() });
    }
    if let Some(n) = mu0.weights.iter().position(|&w| w < 0.0) {
        return Err(Error::InvalidParams(format!("initial measure negative at n = {n}")));
    }

    let c = &policy.efforts;
    let mut y = mu0.weights.clone();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; len]; 7];
    let mut nu = vec![0.0; len];
    let mut tmp = vec![0.0; len];
    let mut y_new = vec![0.0; len];

    let mut traj = Trajectory {
        times: vec![0.0],
        measures: vec![snapshot(&y)],
        mass_series: vec![y.iter().sum()],
        max_clip: 0.0,
        steps: 0,
        rejected: 0,
    };

    eval_rhs(&y, c, params, &mut nu, &mut k[0]);
    let mut t = 0.0;
    let scale0 = k[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut h = if scale0 > 0.0 { (0.01 / scale0).min(dt_out) } else { dt_out };
    let mut out_index = 1u64;
    let mut next_out = dt_out.min(t_end);

    while t < t_end {
        let remaining = next_out - t;
        let hit = h >= remaining;
        let h_use = if hit { remaining } else { h };
        for s in 1..7 {
            for i in 0..len {
                let mut acc = y[i];
                for j in 0..s {
                    acc += h_use * A[s - 1][j] * k[j][i];
                }
                tmp[i] = acc;
            }
            if s == 6 {
                y_new.copy_from_slice(&tmp);
            }
            eval_rhs(&tmp, c, params, &mut nu, &mut k[s]);
        }
        let mut ratio = 0.0f64;
        for i in 0..len {
            let e: f64 = (0..7).map(|j| E[j] * k[j][i]).sum();
            let sc = cfg.ode_atol + cfg.ode_rtol * y[i].abs().max(y_new[i].abs());
            ratio = ratio.max((h_use * e).abs() / sc);
        }
        let (undershoot_at, undershoot) =
            y_new.iter().enumerate().fold((0, 0.0f64), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        if ratio <= 1.0 && undershoot >= -cfg.clip_tol {
            traj.steps += 1;
            t = if hit { next_out } else { t + h_use };
            for v in y_new.iter_mut() {
                if *v < 0.0 {
                    traj.max_clip = traj.max_clip.max(-*v);
                    *v = 0.0;
                } else if *v < FLUSH {
                    *v = 0.0;
                }
            }
            std::mem::swap(&mut y, &mut y_new);
            // first-same-as-last: the seventh stage is the derivative at the new point,
            // recomputed only if clipping changed the state
            if undershoot < 0.0 {
                eval_rhs(&y, c, params, &mut nu, &mut k[0]);
            } else {
                k.swap(0, 6);
            }
            let factor = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
            h = if hit { h.max(h_use * factor) } else { h_use * factor };
            if hit {
                traj.times.push(t);
                traj.measures.push(snapshot(&y));
                traj.mass_series.push(y.iter().sum());
                out_index += 1;
                next_out = (out_index as f64 * dt_out).min(t_end);
            }
        } else {
            traj.rejected += 1;
            let factor = if ratio > 1.0 { (0.9 * ratio.powf(-0.2)).clamp(0.1, 0.9) } else { 0.5 };
            h = h_use * factor;
            if h < 1e-13 * t.max(1.0) {
                if ratio <= 1.0 {
                    return Err(Error::NegativeUndershoot { t, index: undershoot_at, value: undershoot });
                }
                return Err(Error::StepSizeUnderflow { t, h, err_ratio: ratio });
            }
        }
    }
    if traj.max_clip > 0.0 {
        log::debug!("clipped negative entries up to {:e}", traj.max_clip);
    }
    let worst = traj.mass_series.iter().fold(0.0f64, |a, m| a.max((m - 1.0).abs()));
    if worst > 1e-6 && (mu0.mass() - 1.0).abs() <= 1e-6 {
        log::warn!("mass drifted by {worst:e} from one; mass is leaving the window");
    }
    Ok(traj)
}

fn snapshot(y: &[f64]) -> PrecisionMeasure {
    let mut m = PrecisionMeasure::from_weights(y.to_vec());
    m.tail_mass = (1.0 - m.mass()).max(0.0);
    m
}

/// Outcome of the no-mass-loss diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassLossReport {
    /// `η ≥ C_N c_H`.
    pub condition_holds: bool,
    pub eta: f64,
    pub bound: f64,
    /// Window mass at the end of the diagnostic run.
    pub final_mass: Option<f64>,
    /// `1 + (η − C_N C̄)/C_N²` with `C̄` including effort of mass beyond the window.
    pub predicted_mass: Option<f64>,
    pub t_end: Option<f64>,
}

/// Checks `η ≥ C_N c_H`; when it fails, integrates from `π` to `t_end` and reports
/// the limiting-mass estimate.
pub fn mass_loss_check(policy: &Policy, params: &ModelParams, t_end: f64) -> Result<MassLossReport> {
    let c_n = policy.effort(policy.flat_tail_start());
    let bound = c_n * params.c_hi;
    let condition_holds = params.eta >= bound;
    let mut report =
        MassLossReport { condition_holds, eta: params.eta, bound, final_mass: None, predicted_mass: None, t_end: None };
    if condition_holds {
        return Ok(report);
    }
    log::warn!("eta = {} is below C_N c_H = {bound}; mass may escape", params.eta);
    let traj = integrate(&params.pi, policy, params, t_end, t_end)?;
    let last = traj.last();
    let mass = last.mass();
    let c_bar: f64 =
        last.weights.iter().zip(&policy.efforts).map(|(m, c)| m * c).sum::<f64>() + c_n * (1.0 - mass).max(0.0);
    report.final_mass = Some(mass);
    report.t_end = Some(t_end);
    if (mass - 1.0).abs() > 1e-6 && c_n > 0.0 {
        report.predicted_mass = Some(1.0 + (params.eta - c_n * c_bar) / (c_n * c_n));
    }
    Ok(report)
}
