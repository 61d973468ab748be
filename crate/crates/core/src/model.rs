//! Domain types shared by every module.
//!
//! Arms are always indexed `0 = control`, `1 = treatment 1`,
//! `2 = treatment 2`, both in memory and in every serialized form.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Experiment arm. Serializes as its integer index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Arm {
    Control = 0,
    Treatment1 = 1,
    Treatment2 = 2,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Control, Arm::Treatment1, Arm::Treatment2];
    pub const TREATMENTS: [Arm; 2] = [Arm::Treatment1, Arm::Treatment2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Arm::Control),
            1 => Ok(Arm::Treatment1),
            2 => Ok(Arm::Treatment2),
            _ => Err(Error::Domain(format!("arm index must be 0, 1 or 2, got {i}"))),
        }
    }

    /// The other treatment arm. Control maps to itself.
    pub fn rival(self) -> Self {
        match self {
            Arm::Control => Arm::Control,
            Arm::Treatment1 => Arm::Treatment2,
            Arm::Treatment2 => Arm::Treatment1,
        }
    }

    pub fn is_treatment(self) -> bool {
        self != Arm::Control
    }
}

impl From<Arm> for u8 {
    fn from(a: Arm) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Arm {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Arm::from_index(usize::from(v))
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Super-population means and variances of the three potential outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHyperparams")]
pub struct Hyperparams {
    pub mu: [f64; 3],
    pub sigma2: [f64; 3],
}

#[derive(Deserialize)]
struct RawHyperparams {
    mu: [f64; 3],
    sigma2: [f64; 3],
}

impl TryFrom<RawHyperparams> for Hyperparams {
    type Error = Error;
    fn try_from(raw: RawHyperparams) -> Result<Self> {
        Hyperparams::new(raw.mu, raw.sigma2)
    }
}

impl Hyperparams {
    pub fn new(mu: [f64; 3], sigma2: [f64; 3]) -> Result<Self> {
        for (w, (&m, &s)) in mu.iter().zip(&sigma2).enumerate() {
            ensure_finite(&format!("mu[{w}]"), m)?;
            ensure_finite(&format!("sigma2[{w}]"), s)?;
            if s <= 0.0 {
                return Err(Error::Domain(format!("sigma2[{w}] must be positive, got {s}")));
            }
        }
        Ok(Self { mu, sigma2 })
    }

    /// The simulation parameterization: `μ0 = μ1 = 0`, `μ2 = Δ`,
    /// `σ1² + σ2² = 1` with `σ2/σ1 = sigma_ratio`.
    pub fn from_gap(delta: f64, sigma_ratio: f64, sigma0_sq: f64) -> Result<Self> {
        ensure_finite("sigma_ratio", sigma_ratio)?;
        if sigma_ratio <= 0.0 {
            return Err(Error::Domain(format!("sigma_ratio must be positive, got {sigma_ratio}")));
        }
        let r2 = sigma_ratio * sigma_ratio;
        let s1 = 1.0 / (1.0 + r2);
        Self::new([0.0, 0.0, delta], [sigma0_sq, s1, r2 * s1])
    }

    pub fn mean(&self, arm: Arm) -> f64 {
        self.mu[arm.index()]
    }

    pub fn var(&self, arm: Arm) -> f64 {
        self.sigma2[arm.index()]
    }

    pub fn sd(&self, arm: Arm) -> f64 {
        self.var(arm).sqrt()
    }

    /// `Δ = μ2 − μ1`.
    pub fn delta(&self) -> f64 {
        self.mu[2] - self.mu[1]
    }

    /// Treatment effect `τ_w = μ_w − μ0` (zero for the control arm).
    pub fn tau(&self, arm: Arm) -> f64 {
        self.mean(arm) - self.mu[0]
    }

    /// The treatment with the larger mean. An exact tie resolves to
    /// treatment 2; every quantity built on it is tie-invariant.
    pub fn best_treatment(&self) -> Arm {
        if self.delta() >= 0.0 {
            Arm::Treatment2
        } else {
            Arm::Treatment1
        }
    }
}

/// Units per arm for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    pub n: [u64; 3],
}

impl Allocation {
    pub fn new(n0: u64, n1: u64, n2: u64) -> Self {
        Self { n: [n0, n1, n2] }
    }

    pub fn get(&self, arm: Arm) -> u64 {
        self.n[arm.index()]
    }

    pub fn total(&self) -> u64 {
        self.n.iter().sum()
    }

    pub fn n_treatment(&self) -> u64 {
        self.n[1] + self.n[2]
    }

    /// Element-wise sum, e.g. pilot plus post-pilot counts.
    pub fn plus(&self, other: &Allocation) -> Allocation {
        Allocation::new(self.n[0] + other.n[0], self.n[1] + other.n[1], self.n[2] + other.n[2])
    }

    /// Variance of `μ̂2 − μ̂1`: `σ1²/n1 + σ2²/n2`.
    pub fn gap_variance(&self, h: &Hyperparams) -> Result<f64> {
        if self.n[1] == 0 || self.n[2] == 0 {
            return Err(Error::Precondition(format!(
                "gap variance needs n1 >= 1 and n2 >= 1, got {:?}",
                self.n
            )));
        }
        Ok(h.sigma2[1] / self.n[1] as f64 + h.sigma2[2] / self.n[2] as f64)
    }

    /// Equal split of `total` units with the remainder going to control.
    pub fn equal(total: u64) -> Self {
        let base = total / 3;
        Allocation::new(total - 2 * base, base, base)
    }
}

/// Free-function form of [`Allocation::gap_variance`].
pub fn gap_variance(h: &Hyperparams, a: &Allocation) -> Result<f64> {
    a.gap_variance(h)
}

/// Pilot counts, total budget and the post-pilot counts chosen after the pilot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoStagePlan {
    pub pilot: Allocation,
    pub total_budget: u64,
    pub post: Allocation,
}

impl TwoStagePlan {
    pub fn new(pilot: Allocation, total_budget: u64, post: Allocation) -> Result<Self> {
        let plan = Self {
            pilot,
            total_budget,
            post,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn pilot_budget(&self) -> u64 {
        self.pilot.total()
    }

    pub fn post_budget(&self) -> u64 {
        self.total_budget - self.pilot.total()
    }

    /// Pilot plus post-pilot counts per arm.
    pub fn combined(&self) -> Allocation {
        self.pilot.plus(&self.post)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.pilot.n.iter().position(|&m| m < 2) {
            return Err(Error::Precondition(format!(
                "pilot arm {w} has {} units; at least 2 are needed to estimate a variance",
                self.pilot.n[w]
            )));
        }
        if self.pilot.total() >= self.total_budget {
            return Err(Error::Precondition(format!(
                "pilot budget {} must be below the total budget {}",
                self.pilot.total(),
                self.total_budget
            )));
        }
        if self.post.total() != self.post_budget() {
            return Err(Error::Precondition(format!(
                "post-pilot counts sum to {}, expected {}",
                self.post.total(),
                self.post_budget()
            )));
        }
        if self.post.n.contains(&0) {
            return Err(Error::Precondition(format!(
                "every post-pilot arm needs at least one unit, got {:?}",
                self.post.n
            )));
        }
        Ok(())
    }
}

/// Per-arm counts, means and unbiased variances of a batch of outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub count: [u64; 3],
    pub mean: [f64; 3],
    /// `None` when the arm has fewer than two observations.
    pub var_hat: [Option<f64>; 3],
}

impl ArmStats {
    /// `Δ̂ = μ̂2 − μ̂1`.
    pub fn delta_hat(&self) -> f64 {
        self.mean[2] - self.mean[1]
    }

    pub fn counts(&self) -> Allocation {
        Allocation { n: self.count }
    }

    /// Plug-in hyperparameters built from these statistics. Variances below
    /// `floor` are raised to it; the returned flag reports whether any were.
    pub fn plugin(&self, floor: f64) -> Result<(Hyperparams, bool)> {
        let mut sigma2 = [0.0; 3];
        let mut floored = false;
        for w in 0..3 {
            let v = self.var_hat[w].ok_or_else(|| {
                Error::Precondition(format!(
                    "arm {w} has {} observations; its variance is undefined",
                    self.count[w]
                ))
            })?;
            if v < floor {
                floored = true;
                sigma2[w] = floor;
            } else {
                sigma2[w] = v;
            }
        }
        Ok((Hyperparams::new(self.mean, sigma2)?, floored))
    }
}

/// Result of one design run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignOutcome {
    pub winner: Arm,
    pub tau_raw: f64,
    pub bias_term: f64,
    pub tau_debiased: f64,
    pub pooled_means: [f64; 3],
    /// Pilot share `m_w / (m_w + n_w)` of each arm's pooled sample.
    pub omega: [f64; 3],
    pub tie_broken: bool,
    /// Set when a pilot variance had to be floored to keep the plug-in finite.
    pub variance_floored: bool,
}

/// Lower bound `δ_T = ½ T^(−α)` on allocation proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipDomain {
    pub alpha: f64,
    pub delta: f64,
}

impl ClipDomain {
    pub fn for_budget(alpha: f64, total_budget: u64) -> Result<Self> {
        ensure_finite("alpha", alpha)?;
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1/2), got {alpha}")));
        }
        if total_budget == 0 {
            return Err(Error::Domain("clip domain needs a positive budget".into()));
        }
        let delta = 0.5 * (total_budget as f64).powf(-alpha);
        if delta >= 1.0 / 3.0 {
            return Err(Error::Infeasible(format!(
                "δ = {delta} leaves an empty clipped simplex (needs δ < 1/3)"
            )));
        }
        Ok(Self { alpha, delta })
    }

    /// Smallest admissible count per arm when `units` are split.
    pub fn min_count(&self, units: u64) -> u64 {
        ((units as f64) * self.delta).ceil().max(1.0) as u64
    }
}

/// Neyman proportions between control and the winning treatment, stored in
/// slot order `(control, sub-optimal, winner)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeymanTarget {
    pub p_star: [f64; 3],
}

impl NeymanTarget {
    /// Proportions re-indexed by arm for a given winning treatment.
    pub fn in_arm_order(&self, winner: Arm) -> Result<[f64; 3]> {
        match winner {
            Arm::Treatment2 => Ok(self.p_star),
            Arm::Treatment1 => Ok([self.p_star[0], self.p_star[2], self.p_star[1]]),
            Arm::Control => Err(Error::Domain("the winner must be a treatment arm".into())),
        }
    }
}
