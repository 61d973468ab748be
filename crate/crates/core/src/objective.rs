//! Closed-form mean squared errors of the selected treatment effect and the
//! pilot plug-in objective minimized by the adaptive design.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{cdf, mills, pdf};
use crate::model::{Allocation, Arm, ArmStats, Hyperparams};

/// Floor applied to pilot variances before they enter the plug-in objective.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Which estimator of the winner's effect the objective describes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// `τ̂ − b`, conditionally unbiased given the selected arm.
    #[default]
    Debiased,
    /// The raw difference in means of the selected arm.
    Uncorrected,
}

/// Treatment-side MSE `E[(μ̂_ŵ − b_ŵ − μ_wmax)²]` for arm-mean variances
/// `s1 = σ1²/n1`, `s2 = σ2²/n2` (`b ≡ 0` for the uncorrected estimator).
///
/// Counts enter only through `s1` and `s2`, so fractional counts are fine.
pub fn treatment_mse_real(kind: EstimatorKind, delta: f64, s1: f64, s2: f64) -> f64 {
    let v = s1 + s2;
    let sd = v.sqrt();
    let r = delta / sd;
    let (phi, up, down) = (pdf(r), cdf(r), cdf(-r));

    // Selected-arm bucket of winner w: E[(μ̂_w − μ_w)² 1{ŵ = w}] less, for the
    // debiased estimator, the squared bias times P(ŵ = w).
    let k2 = s2 * s2 / v;
    let k1 = s1 * s1 / v;
    let mut total = s2 * up - k2 * r * phi + s1 * down + k1 * r * phi;
    match kind {
        EstimatorKind::Debiased => {
            total -= k2 * phi * mills(r) + k1 * phi * mills(-r);
        }
        EstimatorKind::Uncorrected => {
            // cross terms 2Δ·E[(μ̂_w − μ_w) 1{ŵ = w}] when w is the wrong arm
            if delta > 0.0 {
                total -= 2.0 * delta * s1 / sd * phi;
            } else if delta < 0.0 {
                total += 2.0 * delta * s2 / sd * phi;
            }
        }
    }
    if delta > 0.0 {
        total += delta * delta * down;
    } else if delta < 0.0 {
        total += delta * delta * up;
    }
    total.max(0.0)
}

fn treatment_variances(h: &Hyperparams, n1: u64, n2: u64) -> Result<(f64, f64)> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::Precondition(format!(
            "treatment counts must be at least 1, got n1 = {n1}, n2 = {n2}"
        )));
    }
    Ok((h.sigma2[1] / n1 as f64, h.sigma2[2] / n2 as f64))
}

/// MSE of the debiased winner estimate, treatment side only.
pub fn mse_treatment(h: &Hyperparams, n1: u64, n2: u64) -> Result<f64> {
    mse_treatment_kind(EstimatorKind::Debiased, h, n1, n2)
}

pub fn mse_treatment_kind(kind: EstimatorKind, h: &Hyperparams, n1: u64, n2: u64) -> Result<f64> {
    let (s1, s2) = treatment_variances(h, n1, n2)?;
    Ok(treatment_mse_real(kind, h.delta(), s1, s2))
}

/// Full MSE of the debiased effect estimate: treatment side plus `σ0²/n0`.
pub fn oracle_mse(h: &Hyperparams, a: &Allocation) -> Result<f64> {
    oracle_mse_kind(EstimatorKind::Debiased, h, a)
}

pub fn oracle_mse_kind(kind: EstimatorKind, h: &Hyperparams, a: &Allocation) -> Result<f64> {
    if a.n[0] == 0 {
        return Err(Error::Precondition("control count must be at least 1".into()));
    }
    Ok(mse_treatment_kind(kind, h, a.n[1], a.n[2])? + h.sigma2[0] / a.n[0] as f64)
}

/// Objective evaluated at real-valued effective counts `eff`.
pub(crate) fn full_mse_real(kind: EstimatorKind, h: &Hyperparams, eff: [f64; 3]) -> f64 {
    treatment_mse_real(kind, h.delta(), h.sigma2[1] / eff[1], h.sigma2[2] / eff[2]) + h.sigma2[0] / eff[0]
}

/// Plug-in objective `Ê(n)` built from pilot statistics: the full MSE with
/// pilot means and variances substituted and counts `m_w + n_w`.
pub fn adaptive_objective(stats: &ArmStats, pilot: &Allocation, candidate: &Allocation) -> Result<f64> {
    adaptive_objective_kind(EstimatorKind::Debiased, stats, pilot, candidate)
}

pub fn adaptive_objective_kind(
    kind: EstimatorKind,
    stats: &ArmStats,
    pilot: &Allocation,
    candidate: &Allocation,
) -> Result<f64> {
    if candidate.n.contains(&0) {
        return Err(Error::Precondition(format!(
            "candidate counts must be at least 1, got {:?}",
            candidate.n
        )));
    }
    if !stats.delta_hat().is_finite() {
        return Err(Error::Domain("pilot gap estimate is not finite".into()));
    }
    let (h, _) = stats.plugin(VARIANCE_FLOOR)?;
    let eff = candidate.plus(pilot).n.map(|n| n as f64);
    Ok(full_mse_real(kind, &h, eff))
}

/// `σ²_w / p_w + σ0² / p0` for the winning treatment `w`.
pub fn neyman_variance(h: &Hyperparams, p: [f64; 3], winner: Arm) -> Result<f64> {
    if !winner.is_treatment() {
        return Err(Error::Domain("the winner must be a treatment arm".into()));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("proportions {p:?} are not on the simplex")));
    }
    let w = winner.index();
    if p[0] <= 0.0 || p[w] <= 0.0 {
        return Err(Error::Domain(format!(
            "control and winner proportions must be positive, got {p:?}"
        )));
    }
    Ok(h.sigma2[w] / p[w] + h.sigma2[0] / p[0])
}
