//! One-dimensional solvers shared by the proximal and ADMM subproblems.

use crate::error::{Error, Result};

pub(crate) const FOC_TOL: f64 = 1e-12;
const MAX_NEWTON: usize = 60;
const MAX_BISECTIONS: usize = 400;

/// Root of a nondecreasing function `foc` on `[floor, inf)`, or `floor` when
/// `foc(floor) >= 0`.
///
/// Safeguarded Newton: steps that leave the current bracket fall back to
/// bisection. `dfoc` may return `None`, in which case only bisection is used.
pub(crate) fn increasing_root<F, D>(foc: F, dfoc: D, floor: f64, hint: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> Option<f64>,
{
    let f_floor = foc(floor);
    if f_floor >= 0.0 {
        return Ok(floor);
    }
    // bracket [a, b] with foc(a) < 0 <= foc(b)
    let mut a = floor;
    let mut step = (hint - floor).abs().max(1.0);
    let mut b = floor + step;
    let mut fb = foc(b);
    while fb < 0.0 {
        a = b;
        step *= 2.0;
        b = floor + step;
        if !b.is_finite() {
            return Err(Error::NewtonDidNotConverge);
        }
        fb = foc(b);
    }
    if fb.abs() <= FOC_TOL {
        return Ok(b);
    }

    let mut x = if hint > a && hint < b { hint } else { 0.5 * (a + b) };
    for _ in 0..MAX_NEWTON {
        let fx = foc(x);
        if fx.abs() <= FOC_TOL * (1.0 + x.abs()) {
            return Ok(x);
        }
        if fx < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let next = match dfoc(x) {
            Some(d) if d > 0.0 && d.is_finite() => x - fx / d,
            _ => 0.5 * (a + b),
        };
        x = if next > a && next < b { next } else { 0.5 * (a + b) };
        if b - a <= f64::EPSILON * b.abs().max(1.0) {
            return Ok(x);
        }
    }

    // Newton did not settle: plain bisection on the monotone function.
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            return Ok(mid);
        }
        let fm = foc(mid);
        if fm.abs() <= FOC_TOL * (1.0 + mid.abs()) {
            return Ok(mid);
        }
        if fm < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Err(Error::NewtonDidNotConverge)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_root() {
        // 4 p^3 = 1
        let r = increasing_root(|p| 4.0 * p * p * p - 1.0, |p| Some(12.0 * p * p), 0.0, 0.0).unwrap();
        assert!((r - 0.25f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn floor_when_already_nonnegative() {
        assert_eq!(increasing_root(|p| p + 1.0, |_| Some(1.0), 0.0, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn bisection_only() {
        let r = increasing_root(|p| p - 2.5, |_| None, 0.0, 0.0).unwrap();
        assert!((r - 2.5).abs() < 1e-11);
    }
}
