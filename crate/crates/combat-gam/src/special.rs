//! Special functions backing the F-test p-values.
//!
//! `reg_inc_beta` follows the classic recipe: a log-gamma prefactor plus the
//! continued fraction evaluated with the modified Lentz method, switching to
//! the symmetric tail when `x` is past the central cut so the fraction always
//! converges quickly. Absolute accuracy is tested at the 1e-12 level.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecialError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("continued fraction failed to converge: {0}")]
    NoConvergence(String),
}

/// Lanczos approximation (g = 7, 9 terms), relative accuracy ~1e-14.
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the Lanczos sum in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (std::f64::consts::TAU).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Log of the beta function B(a, b).
fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

const LENTZ_TINY: f64 = 1e-30;
const LENTZ_EPS: f64 = 1e-15;
const LENTZ_MAX_ITER: usize = 300;

/// Continued fraction for the incomplete beta, valid for
/// `x < (a + 1) / (a + b + 2)`. Modified Lentz iteration.
fn beta_cf(x: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < LENTZ_TINY {
        d = LENTZ_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=LENTZ_MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;
        // Even step.
        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < LENTZ_TINY {
            d = LENTZ_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < LENTZ_TINY {
            c = LENTZ_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < LENTZ_TINY {
            d = LENTZ_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < LENTZ_TINY {
            c = LENTZ_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < LENTZ_EPS {
            return Ok(h);
        }
    }
    Err(SpecialError::NoConvergence(format!(
        "betainc continued fraction at x={x}, a={a}, b={b}"
    )))
}

/// Regularized incomplete beta function I_x(a, b).
///
/// Satisfies I_0 = 0, I_1 = 1, and the symmetry I_x(a, b) = 1 - I_(1-x)(b, a).
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(SpecialError::Domain(format!(
            "shape parameters must be positive, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(SpecialError::Domain(format!("x must lie in [0, 1], got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_pre = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(ln_pre.exp() * beta_cf(x, a, b)? / a)
    } else {
        // Symmetric tail converges faster there.
        Ok(1.0 - ln_pre.exp() * beta_cf(1.0 - x, b, a)? / b)
    }
}

/// CDF of the F distribution with `d1`, `d2` degrees of freedom at `x`.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> Result<f64, SpecialError> {
    if !(d1 > 0.0) || !(d2 > 0.0) {
        return Err(SpecialError::Domain(format!(
            "degrees of freedom must be positive, got d1={d1}, d2={d2}"
        )));
    }
    if x.is_nan() {
        return Err(SpecialError::Domain("f_cdf of NaN".into()));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    reg_inc_beta(d1 * x / (d1 * x + d2), 0.5 * d1, 0.5 * d2)
}

/// Survival function 1 - CDF, computed through the mirrored beta argument so
/// small right tails keep full precision.
pub fn f_sf(x: f64, d1: f64, d2: f64) -> Result<f64, SpecialError> {
    if !(d1 > 0.0) || !(d2 > 0.0) {
        return Err(SpecialError::Domain(format!(
            "degrees of freedom must be positive, got d1={d1}, d2={d2}"
        )));
    }
    if x.is_nan() {
        return Err(SpecialError::Domain("f_sf of NaN".into()));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    reg_inc_beta(d2 / (d2 + d1 * x), 0.5 * d2, 0.5 * d1)
}
