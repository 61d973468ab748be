//! Sample statistics, winner selection and the conditional selection-bias
//! correction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::gaussian::{cdf, mills};
use crate::model::{Allocation, Arm, ArmStats, Hyperparams};

/// Outcome of the argmax rule on the two treatment means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub winner: Arm,
    pub tie_broken: bool,
}

/// Count, mean and unbiased variance of each arm.
pub fn sample_stats(outcomes_by_arm: [&[f64]; 3]) -> ArmStats {
    let mut count = [0u64; 3];
    let mut mean = [0.0; 3];
    let mut var_hat = [None; 3];
    for (w, xs) in outcomes_by_arm.iter().enumerate() {
        let (n, m, v) = mean_and_var(xs);
        count[w] = n;
        mean[w] = m;
        var_hat[w] = v;
    }
    ArmStats {
        count,
        mean,
        var_hat,
    }
}

/// Mean and `(n − 1)`-denominator variance. The mean of an empty slice is
/// reported as NaN; callers never read it without checking the count.
pub(crate) fn mean_and_var(xs: &[f64]) -> (u64, f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (0, f64::NAN, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = (n >= 2).then(|| {
        let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        ss / (n - 1) as f64
    });
    (n as u64, mean, var)
}

/// Pick the treatment with the larger mean; an exact tie is a fair coin
/// drawn from `rng`.
pub fn select_winner<R: Rng + ?Sized>(mean1: f64, mean2: f64, rng: &mut R) -> Result<SelectionResult> {
    ensure_finite("mean1", mean1)?;
    ensure_finite("mean2", mean2)?;
    let result = if mean2 > mean1 {
        SelectionResult {
            winner: Arm::Treatment2,
            tie_broken: false,
        }
    } else if mean1 > mean2 {
        SelectionResult {
            winner: Arm::Treatment1,
            tie_broken: false,
        }
    } else {
        let winner = if rng.random_bool(0.5) {
            Arm::Treatment2
        } else {
            Arm::Treatment1
        };
        SelectionResult {
            winner,
            tie_broken: true,
        }
    };
    Ok(result)
}

/// Conditional bias `E[μ̂_w − μ_w | ŵ = w]` for arm-mean variances
/// `s1 = σ1²/n1`, `s2 = σ2²/n2` and gap `Δ = μ2 − μ1`.
pub(crate) fn selection_bias(delta: f64, s1: f64, s2: f64, winner: Arm) -> f64 {
    let sd = (s1 + s2).sqrt();
    let r = delta / sd;
    match winner {
        Arm::Treatment2 => s2 / sd * mills(r),
        Arm::Treatment1 => s1 / sd * mills(-r),
        Arm::Control => 0.0,
    }
}

/// Bias term `b_w` subtracted from the winner's raw effect estimate.
///
/// Uses the Mills ratio so the term stays finite for any `|Δ/√V|`; it
/// underflows to zero once the selected arm is astronomically unlikely to
/// have been beaten.
pub fn bias_term(h: &Hyperparams, a: &Allocation, winner: Arm) -> Result<f64> {
    if !winner.is_treatment() {
        return Err(Error::Precondition("the winner must be a treatment arm".into()));
    }
    a.gap_variance(h)?;
    let s1 = h.sigma2[1] / a.n[1] as f64;
    let s2 = h.sigma2[2] / a.n[2] as f64;
    Ok(selection_bias(h.delta(), s1, s2, winner))
}

pub fn debias(tau_raw: f64, b: f64) -> f64 {
    tau_raw - b
}

/// Two-stage pooled mean of one arm and its pilot weight
/// `ω = m / (m + n)`.
pub fn pooled_mean(pilot: &ArmStats, post: &ArmStats, arm: Arm) -> Result<(f64, f64)> {
    let w = arm.index();
    let m = pilot.count[w];
    let n = post.count[w];
    if m + n == 0 {
        return Err(Error::Precondition(format!("arm {w} has no observations in either stage")));
    }
    let total = (m + n) as f64;
    let omega = m as f64 / total;
    let mut sum = 0.0;
    if m > 0 {
        sum += m as f64 * pilot.mean[w];
    }
    if n > 0 {
        sum += n as f64 * post.mean[w];
    }
    Ok((sum / total, omega))
}

/// A selection rule that depends on the data only through `Δ̂ = μ̂2 − μ̂1`:
/// treatment 2 is chosen whenever `Δ̂` falls in one of the open intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct GapRule {
    pub select_second: Vec<(f64, f64)>,
}

impl GapRule {
    /// The argmax rule: choose treatment 2 iff `Δ̂ > 0`.
    pub fn sign() -> Self {
        Self {
            select_second: vec![(0.0, f64::INFINITY)],
        }
    }

    /// Probability that `Δ̂ ~ N(Δ, V)` lands in the rule's treatment-2 region.
    pub fn prob_select_second(&self, delta: f64, v: f64) -> f64 {
        let sd = v.sqrt();
        self.select_second
            .iter()
            .map(|&(lo, hi)| {
                let upper = if hi.is_finite() { cdf((hi - delta) / sd) } else { 1.0 };
                let lower = if lo.is_finite() { cdf((lo - delta) / sd) } else { 0.0 };
                (upper - lower).max(0.0)
            })
            .sum()
    }

    /// Probability of not choosing the better treatment (`Δ ≠ 0`).
    pub fn error_prob(&self, delta: f64, v: f64) -> f64 {
        let p2 = self.prob_select_second(delta, v);
        if delta > 0.0 {
            1.0 - p2
        } else {
            p2
        }
    }

    /// Worst-case error over the given effect gaps, with the gap variance
    /// allowed to depend on `Δ` through the allocation. Returns the maximum
    /// and the gap attaining it.
    pub fn worst_case_error<F>(&self, deltas: &[f64], gap_variance: F) -> (f64, f64)
    where
        F: Fn(f64) -> f64,
    {
        deltas
            .iter()
            .map(|&d| (self.error_prob(d, gap_variance(d)), d))
            .fold((f64::NEG_INFINITY, f64::NAN), |best, cur| if cur.0 > best.0 { cur } else { best })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_stats_examples() {
        let empty: [f64; 0] = [];
        let s = sample_stats([&[2.0, 4.0], &[5.0], &[1.0, 1.0, 1.0, 1.0]]);
        assert_eq!(s.count, [2, 1, 4]);
        assert_eq!(s.mean, [3.0, 5.0, 1.0]);
        assert_eq!(s.var_hat, [Some(2.0), None, Some(0.0)]);
        let s = sample_stats([&empty, &[1.0], &[1.0]]);
        assert_eq!(s.count[0], 0);
        assert!(s.var_hat[0].is_none());
    }

    #[test]
    fn strict_order_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = select_winner(1.0, 2.0, &mut rng).unwrap();
        assert_eq!(r, SelectionResult { winner: Arm::Treatment2, tie_broken: false });
        let r = select_winner(-1.0, -2.0, &mut rng).unwrap();
        assert_eq!(r.winner, Arm::Treatment1);
        assert!(select_winner(f64::NAN, 0.0, &mut rng).is_err());
    }

    #[test]
    fn ties_are_fair_coin_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut second = 0u32;
        for _ in 0..n {
            let r = select_winner(0.3, 0.3, &mut rng).unwrap();
            assert!(r.tie_broken);
            if r.winner == Arm::Treatment2 {
                second += 1;
            }
        }
        let freq = f64::from(second) / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() <= 3.0 * se, "freq {freq}");
    }

    #[test]
    fn bias_term_at_zero_gap() {
        let h = Hyperparams::new([0.0; 3], [1.0, 1.0, 1.0]).unwrap();
        let a = Allocation::new(100, 100, 100);
        let b2 = bias_term(&h, &a, Arm::Treatment2).unwrap();
        let expected = 1.0 / (100.0 * 0.02f64.sqrt()) * (2.0 / std::f64::consts::PI).sqrt();
        assert_relative_eq!(b2, expected, max_relative = 1e-13);
        assert_relative_eq!(b2, 0.056_418_958_4, epsilon = 1e-10);
        assert_eq!(b2, bias_term(&h, &a, Arm::Treatment1).unwrap());
        assert!(bias_term(&h, &a, Arm::Control).is_err());
        assert!(bias_term(&h, &Allocation::new(1, 0, 1), Arm::Treatment1).is_err());
    }

    #[test]
    fn mis_selection_bias_dominates_and_grows() {
        let a = Allocation::new(400, 400, 400);
        let mut last = 0.0;
        for delta in [0.1, 0.2, 0.3] {
            let h = Hyperparams::new([0.0, 0.0, delta], [1.0, 0.5, 0.5]).unwrap();
            let b1 = bias_term(&h, &a, Arm::Treatment1).unwrap();
            let b2 = bias_term(&h, &a, Arm::Treatment2).unwrap();
            assert!(b1 > b2);
            assert!(b1 > last);
            last = b1;
        }
    }

    #[test]
    fn bias_term_extreme_gap_is_finite() {
        let a = Allocation::new(10, 10, 10);
        for delta in [-1e3, -40.0, 40.0, 1e3] {
            let h = Hyperparams::new([0.0, 0.0, delta], [1.0, 1.0, 1.0]).unwrap();
            for w in Arm::TREATMENTS {
                let b = bias_term(&h, &a, w).unwrap();
                assert!(b.is_finite() && b >= 0.0, "delta={delta} w={w} b={b}");
            }
        }
    }

    #[test]
    fn debias_examples() {
        assert_relative_eq!(debias(1.0, 0.1), 0.9);
        assert_eq!(debias(3.5, 0.0), 3.5);
        assert_relative_eq!(debias(0.05, 0.0564), -0.0064, epsilon = 1e-15);
    }

    #[test]
    fn pooled_mean_examples() {
        let stats = |n: u64, m: f64| ArmStats {
            count: [n; 3],
            mean: [m; 3],
            var_hat: [None; 3],
        };
        let (mean, omega) = pooled_mean(&stats(10, 2.0), &stats(30, 4.0), Arm::Treatment1).unwrap();
        assert_relative_eq!(mean, 3.5);
        assert_relative_eq!(omega, 0.25);
        let (mean, omega) = pooled_mean(&stats(10, 2.0), &stats(0, f64::NAN), Arm::Control).unwrap();
        assert_eq!((mean, omega), (2.0, 1.0));
        let (mean, omega) = pooled_mean(&stats(7, 1.25), &stats(7, 1.25), Arm::Treatment2).unwrap();
        assert_eq!((mean, omega), (1.25, 0.5));
        assert!(pooled_mean(&stats(0, 0.0), &stats(0, 0.0), Arm::Control).is_err());
    }

    #[test]
    fn sign_rule_error() {
        let rule = GapRule::sign();
        // Δ̂ ~ N(0.1, 1): wrong when Δ̂ < 0
        assert_relative_eq!(rule.error_prob(0.1, 1.0), cdf(-0.1), max_relative = 1e-14);
        assert_relative_eq!(rule.error_prob(-0.1, 1.0), cdf(-0.1), max_relative = 1e-14);
    }
}
