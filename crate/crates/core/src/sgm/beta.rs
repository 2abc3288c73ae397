//! Regularized incomplete beta function and its inverse.

use alloc::format;

use crate::error::{Error, Result};

/// Tolerance on `|I_x(a, b) - q|` targeted by the bisection search.
pub const QUANTILE_TOLERANCE: f64 = 1e-10;

pub fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// `I_x(a, b)`, the Beta(a, b) CDF at `x`.
///
/// Continued fraction (modified Lentz), evaluated on whichever side of the
/// mean converges fastest.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * libm::log(x) + b * libm::log1p(-x) - ln_beta(a, b);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * continued_fraction(x, a, b) / a
    } else {
        1.0 - front * continued_fraction(1.0 - x, b, a) / b
    }
}

fn continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=2000 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

fn validate(q: f64, alpha: f64, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::invalid(format!("beta shape ({alpha}, {beta}) must be positive")));
    }
    Ok(())
}

/// Inverse Beta(alpha, beta) CDF.
///
/// Uses the closed forms when either shape is 1 and bisection on the
/// monotone CDF otherwise.
pub fn beta_inverse_cdf(q: f64, alpha: f64, beta: f64) -> Result<f64> {
    validate(q, alpha, beta)?;
    if alpha == 1.0 {
        // 1 - (1 - q)^(1/beta)
        return Ok(-libm::expm1(libm::log1p(-q) / beta));
    }
    if beta == 1.0 {
        return Ok(libm::pow(q, 1.0 / alpha));
    }
    bisect_beta_quantile(q, alpha, beta)
}

/// Inverse CDF by bisection alone, without closed-form shortcuts.
pub fn bisect_beta_quantile(q: f64, alpha: f64, beta: f64) -> Result<f64> {
    validate(q, alpha, beta)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = regularized_incomplete_beta(mid, alpha, beta);
        if (f - q).abs() <= QUANTILE_TOLERANCE * 1e-3 {
            return Ok(mid);
        }
        if f < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let err = |x: f64| (regularized_incomplete_beta(x, alpha, beta) - q).abs();
    Ok(if err(lo) <= err(hi) { lo } else { hi })
}
