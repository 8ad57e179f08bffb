//! Bracketed root finding for increasing scalar functions.

use crate::error::{Error, Result};

/// Result of [`find_increasing_root`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
}

const MAX_ITER: usize = 500;

/// Finds `x` in `[lo, hi]` with `f(x) = 0` for a nondecreasing `f`.
///
/// `f` may return `-inf` on an initial segment (a blow-up region); those points
/// act as plain lower bounds. Steps are Illinois-modified regula falsi, falling
/// back to bisection whenever the interpolant stalls or an endpoint is infinite.
/// Stops once `|f(x)| <= ftol` or the bracket collapses to adjacent floats.
pub fn find_increasing_root<F>(mut f: F, lo: f64, hi: f64, ftol: f64) -> Result<Root>
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa.is_nan() || fb.is_nan() {
        return Err(Error::Degenerate("balance function returned NaN".into()));
    }
    if fa > 0.0 || fb < 0.0 {
        return Err(Error::BracketFailure { lo, hi, g_lo: fa, g_hi: fb });
    }
    if fa.abs() <= ftol {
        return Ok(Root { x: a, fx: fa, iterations: 0 });
    }
    if fb.abs() <= ftol {
        return Ok(Root { x: b, fx: fb, iterations: 0 });
    }

    let mut side = 0i8;
    for it in 1..=MAX_ITER {
        let mid = 0.5 * (a + b);
        let x = if fa.is_finite() && fb.is_finite() && fb > fa {
            let s = (a * fb - b * fa) / (fb - fa);
            if s > a && s < b {
                s
            } else {
                mid
            }
        } else {
            mid
        };
        let fx = f(x);
        if fx.is_nan() {
            return Err(Error::Degenerate(format!("balance function returned NaN at {x}")));
        }
        if fx.abs() <= ftol {
            return Ok(Root { x, fx, iterations: it });
        }
        if fx < 0.0 {
            a = x;
            fa = fx;
            if side == -1 && fb.is_finite() {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = x;
            fb = fx;
            if side == 1 && fa.is_finite() {
                fa *= 0.5;
            }
            side = 1;
        }
        if b - a <= f64::EPSILON * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
            let (x, fx) = if fa.is_finite() && -fa < fb { (a, fa) } else { (b, fb) };
            return Ok(Root { x, fx, iterations: it });
        }
    }
    let x = 0.5 * (a + b);
    Ok(Root { x, fx: f(x), iterations: MAX_ITER })
}
