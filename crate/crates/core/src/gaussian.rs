//! Standard-normal kernels and conditional moments of a Gaussian pair under
//! the truncation `X > Y + a`.
//!
//! The CDF is evaluated through `erfc` (the FreeBSD msun port in `libm`,
//! documented at below 1 ulp over its whole range). For `z < -37` the
//! lower tail is subnormal in `f64`; there the value is rebuilt from the
//! log-space continued fraction, which keeps `log_std_cdf` accurate all the
//! way out.
//!
//! The checked functions (`std_pdf`, `std_cdf`, `mills_ratio`, ...) reject
//! non-finite input. The crate-internal unchecked variants are used in the
//! objective hot loops where the arguments are known to be finite.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// `1 / sqrt(2π)`
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// `ln(sqrt(2π))`
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the Mills ratio comes from the continued fraction.
pub const MILLS_SWITCH: f64 = -6.0;
/// Below this argument the CDF is rebuilt from its logarithm.
const LOG_TAIL_SWITCH: f64 = -37.0;

/// Means and variances of an independent Gaussian pair `(X, Y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussPair {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
}

impl GaussPair {
    pub fn new(mu_x: f64, mu_y: f64, var_x: f64, var_y: f64) -> Result<Self> {
        ensure_finite("mu_x", mu_x)?;
        ensure_finite("mu_y", mu_y)?;
        ensure_finite("var_x", var_x)?;
        ensure_finite("var_y", var_y)?;
        if var_x <= 0.0 || var_y <= 0.0 {
            return Err(Error::Domain(format!(
                "Gaussian pair variances must be positive, got var_x={var_x}, var_y={var_y}"
            )));
        }
        Ok(Self {
            mu_x,
            mu_y,
            var_x,
            var_y,
        })
    }

    /// Standard deviation of `X - Y`.
    pub fn gap_sd(&self) -> f64 {
        (self.var_x + self.var_y).sqrt()
    }

    /// Standardized truncation point `r = ((μX − μY) − a) / sd(X − Y)`, so
    /// that `P(X > Y + a) = Φ(r)`.
    pub fn standardized_gap(&self, a: f64) -> f64 {
        ((self.mu_x - self.mu_y) - a) / self.gap_sd()
    }
}

pub(crate) fn pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

pub(crate) fn cdf(z: f64) -> f64 {
    if z < LOG_TAIL_SWITCH {
        log_cdf(z).exp()
    } else {
        0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
    }
}

pub(crate) fn log_cdf(z: f64) -> f64 {
    if z < MILLS_SWITCH {
        // log Φ(z) = log φ(z) + log R(|z|), R the upper-tail Mills ratio.
        -0.5 * z * z - LN_SQRT_2PI + tail_ratio(-z).ln()
    } else if z < 0.0 {
        cdf(z).ln()
    } else {
        (-cdf(-z)).ln_1p()
    }
}

pub(crate) fn mills(z: f64) -> f64 {
    if z <= MILLS_SWITCH {
        1.0 / tail_ratio(-z)
    } else {
        pdf(z) / cdf(z)
    }
}

/// `R(x) = (1 − Φ(x)) / φ(x)` for `x ≥ 6` via the Laplace continued fraction
/// `1/(x + 1/(x + 2/(x + 3/(x + …))))`, evaluated with modified Lentz.
fn tail_ratio(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for j in 1..=500u32 {
        let a = if j == 1 { 1.0 } else { f64::from(j - 1) };
        d = x + a * d;
        if d == 0.0 {
            d = TINY;
        }
        c = x + a / c;
        if c == 0.0 {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    f
}

/// Standard normal density.
pub fn std_pdf(z: f64) -> Result<f64> {
    ensure_finite("z", z).map(pdf)
}

/// Standard normal CDF.
pub fn std_cdf(z: f64) -> Result<f64> {
    ensure_finite("z", z).map(cdf)
}

/// Natural log of the standard normal CDF, finite for every finite `z`.
pub fn log_std_cdf(z: f64) -> Result<f64> {
    ensure_finite("z", z).map(log_cdf)
}

/// `φ(z) / Φ(z)`, finite and relatively accurate well into the lower tail
/// (where it behaves like `|z| + 1/|z|`). In the far upper tail the value is
/// below the smallest subnormal for `z > 38.6` and returns `0`.
pub fn mills_ratio(z: f64) -> Result<f64> {
    ensure_finite("z", z).map(mills)
}

/// `E[X | X > Y + a]`.
pub fn trunc_mean(p: &GaussPair, a: f64) -> Result<f64> {
    ensure_finite("a", a)?;
    let sd = p.gap_sd();
    let r = p.standardized_gap(a);
    Ok(p.mu_x + p.var_x / sd * mills(r))
}

/// `E[(X + b)^2 | X > Y + a]`.
pub fn trunc_second_moment(p: &GaussPair, a: f64, b: f64) -> Result<f64> {
    ensure_finite("a", a)?;
    ensure_finite("b", b)?;
    let sd = p.gap_sd();
    let r = p.standardized_gap(a);
    // k = σX²/σZ is the regression slope of X on the standardized gap.
    let k = p.var_x / sd;
    let shift = p.mu_x + b;
    Ok(shift * shift + p.var_x + k * mills(r) * (-k * r + 2.0 * shift))
}
