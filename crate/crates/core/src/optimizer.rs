//! Integer allocation search for the oracle design and the pilot plug-in
//! design.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Allocation, ArmStats, ClipDomain, Hyperparams, NeymanTarget};
use crate::objective::{full_mse_real, mse_treatment, treatment_mse_real, EstimatorKind, VARIANCE_FLOOR};

/// How the `(n0, n1)` plane is searched (`n2` is implied by the budget).
///
/// Domains with at most `exhaustive_limit` feasible pairs are scanned in
/// full. Larger ones get a coarse grid with step `max(1, T / coarse_points)`
/// followed by an exhaustive scan of a `±2·step` window around the coarse
/// minimum. With `multilevel` set the window is instead narrowed in halving
/// steps, which evaluates far fewer points on large budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStrategy {
    pub exhaustive_limit: u64,
    pub coarse_points: u64,
    #[serde(default)]
    pub multilevel: bool,
}

impl Default for SearchStrategy {
    fn default() -> Self {
        Self {
            exhaustive_limit: 200_000,
            coarse_points: 500,
            multilevel: false,
        }
    }
}

impl SearchStrategy {
    /// Preset used for Monte Carlo replications, where the search runs once
    /// per replicate.
    pub fn fast() -> Self {
        Self {
            exhaustive_limit: 2_000,
            coarse_points: 40,
            multilevel: true,
        }
    }

    /// Scan every feasible point.
    pub fn exhaustive() -> Self {
        Self {
            exhaustive_limit: u64::MAX,
            coarse_points: 1,
            multilevel: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    value: f64,
    n0: u64,
    n1: u64,
}

/// Smaller value wins; exact ties go to the smaller `n1`, then smaller `n0`.
fn better(a: &Candidate, b: &Candidate) -> bool {
    match a.value.total_cmp(&b.value) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => (a.n1, a.n0) < (b.n1, b.n0),
    }
}

/// Minimizes `f` over integer `(n0, n1, n2)` with `n_w ≥ lower[w]` and
/// `n0 + n1 + n2 = total`.
fn search<F>(total: u64, lower: [u64; 3], strategy: &SearchStrategy, f: F) -> Result<(Allocation, f64)>
where
    F: Fn(Allocation) -> f64,
{
    let floor: u64 = lower.iter().sum();
    if floor > total {
        return Err(Error::Infeasible(format!(
            "budget {total} cannot give every arm its minimum {lower:?}"
        )));
    }
    let slack = total - floor;
    let max_n0 = lower[0] + slack;
    let max_n1 = |n0: u64| total - n0 - lower[2];
    let mut best: Option<Candidate> = None;
    let visit = |best: &mut Option<Candidate>, n0: u64, n1: u64| {
        let a = Allocation::new(n0, n1, total - n0 - n1);
        let c = Candidate { value: f(a), n0, n1 };
        if best.as_ref().is_none_or(|b| better(&c, b)) {
            *best = Some(c);
        }
    };
    let pairs = (u128::from(slack) + 1) * (u128::from(slack) + 2) / 2;
    if pairs <= u128::from(strategy.exhaustive_limit) {
        for n0 in lower[0]..=max_n0 {
            for n1 in lower[1]..=max_n1(n0) {
                visit(&mut best, n0, n1);
            }
        }
    } else {
        let mut step = (total / strategy.coarse_points.max(1)).max(1);
        let mut n0 = lower[0];
        while n0 <= max_n0 {
            let mut n1 = lower[1];
            while n1 <= max_n1(n0) {
                visit(&mut best, n0, n1);
                n1 += step;
            }
            n0 += step;
        }
        loop {
            let centre = best.expect("coarse grid visits the lower corner");
            let radius = 2 * step;
            let fine = if strategy.multilevel { (step / 2).max(1) } else { 1 };
            let lo0 = centre.n0.saturating_sub(radius).max(lower[0]);
            let hi0 = (centre.n0 + radius).min(max_n0);
            let mut n0 = lo0;
            while n0 <= hi0 {
                let lo1 = centre.n1.saturating_sub(radius).max(lower[1]);
                let hi1 = (centre.n1 + radius).min(max_n1(n0));
                let mut n1 = lo1;
                while n1 <= hi1 {
                    visit(&mut best, n0, n1);
                    n1 += fine;
                }
                n0 += fine;
            }
            if fine == 1 {
                break;
            }
            step = fine;
        }
    }
    let c = best.expect("feasible domain is nonempty");
    Ok((Allocation::new(c.n0, c.n1, total - c.n0 - c.n1), c.value))
}

/// Best split of `n_t` treatment units between the two treatments under the
/// debiased MSE, scanning every `n1` in `1..n_t`.
pub fn optimize_within_treatment(h: &Hyperparams, n_t: u64) -> Result<(u64, u64, f64)> {
    if n_t < 2 {
        return Err(Error::Infeasible(format!("treatment budget must be at least 2, got {n_t}")));
    }
    let mut best = (0, 0, f64::INFINITY);
    for n1 in 1..n_t {
        let v = mse_treatment(h, n1, n_t - n1)?;
        if v < best.2 {
            best = (n1, n_t - n1, v);
        }
    }
    Ok(best)
}

/// Oracle allocation of `total` units minimizing the full debiased MSE.
pub fn solve_oracle_allocation(h: &Hyperparams, total: u64) -> Result<Allocation> {
    solve_oracle_allocation_with(h, total, EstimatorKind::Debiased, &SearchStrategy::default()).map(|(a, _)| a)
}

/// Oracle allocation for either estimator; also returns the objective value.
pub fn solve_oracle_allocation_with(
    h: &Hyperparams,
    total: u64,
    kind: EstimatorKind,
    strategy: &SearchStrategy,
) -> Result<(Allocation, f64)> {
    if total < 3 {
        return Err(Error::Infeasible(format!("budget must be at least 3, got {total}")));
    }
    solve_plugin_allocation(kind, h, &Allocation::default(), total, None, strategy)
}

/// Post-pilot counts `n` summing to `post_budget` that minimize the full MSE
/// at effective counts `pilot + n` under hyperparameters `h`.
///
/// Every arm gets at least one unit, or `ceil(post_budget · δ)` when a clip
/// domain is given.
pub fn solve_plugin_allocation(
    kind: EstimatorKind,
    h: &Hyperparams,
    pilot: &Allocation,
    post_budget: u64,
    clip: Option<&ClipDomain>,
    strategy: &SearchStrategy,
) -> Result<(Allocation, f64)> {
    let min = clip.map_or(1, |c| c.min_count(post_budget));
    let m = pilot.n.map(|x| x as f64);
    let sigma2 = h.sigma2;
    let delta = h.delta();
    search(post_budget, [min; 3], strategy, |a| {
        let eff = [a.n[0] as f64 + m[0], a.n[1] as f64 + m[1], a.n[2] as f64 + m[2]];
        treatment_mse_real(kind, delta, sigma2[1] / eff[1], sigma2[2] / eff[2]) + sigma2[0] / eff[0]
    })
}

/// Post-pilot allocation minimizing the debiased plug-in objective built from
/// pilot statistics. The domain is every arm `≥ 1` or, with `clip`, the
/// clipped simplex scaled to the post-pilot budget.
pub fn solve_adaptive_allocation(
    stats: &ArmStats,
    pilot: &Allocation,
    post_budget: u64,
    clip: Option<&ClipDomain>,
) -> Result<Allocation> {
    if post_budget < 3 {
        return Err(Error::Infeasible(format!("post-pilot budget must be at least 3, got {post_budget}")));
    }
    let (h, _) = stats.plugin(VARIANCE_FLOOR)?;
    solve_plugin_allocation(EstimatorKind::Debiased, &h, pilot, post_budget, clip, &SearchStrategy::default())
        .map(|(a, _)| a)
}

/// Post-pilot counts that bring the pilot up to a full-budget target.
pub fn top_up(target: &Allocation, pilot: &Allocation) -> Result<Allocation> {
    let mut post = [0u64; 3];
    for w in 0..3 {
        post[w] = target.n[w].checked_sub(pilot.n[w]).ok_or_else(|| {
            Error::Infeasible(format!(
                "target {:?} is below the pilot {:?} on arm {w}; re-solve over post-pilot counts instead",
                target.n, pilot.n
            ))
        })?;
    }
    Ok(Allocation { n: post })
}

/// Neyman split between control and the winning treatment.
pub fn neyman_allocation(sigma0: f64, sigma_w: f64) -> Result<NeymanTarget> {
    if !(sigma0.is_finite() && sigma_w.is_finite() && sigma0 > 0.0 && sigma_w > 0.0) {
        return Err(Error::Domain(format!(
            "standard deviations must be positive, got {sigma0} and {sigma_w}"
        )));
    }
    let s = sigma0 + sigma_w;
    Ok(NeymanTarget {
        p_star: [sigma0 / s, 0.0, sigma_w / s],
    })
}

/// Objective value of an allocation under real-valued effective counts, used
/// by proportion-space checks.
pub fn objective_at(kind: EstimatorKind, h: &Hyperparams, effective: [f64; 3]) -> f64 {
    full_mse_real(kind, h, effective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::oracle_mse;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn brute_force(h: &Hyperparams, total: u64) -> (Allocation, f64) {
        let mut best = (Allocation::default(), f64::INFINITY);
        for n1 in 1..total {
            for n0 in 1..total {
                if n0 + n1 >= total {
                    break;
                }
                let a = Allocation::new(n0, n1, total - n0 - n1);
                let v = oracle_mse(h, &a).unwrap();
                if v < best.1 {
                    best = (a, v);
                }
            }
        }
        best
    }

    #[test]
    fn within_treatment_symmetry() {
        let h = Hyperparams::new([0.0; 3], [1.0, 0.5, 0.5]).unwrap();
        for n_t in [2, 10, 100, 534] {
            let (n1, n2, _) = optimize_within_treatment(&h, n_t).unwrap();
            assert_eq!((n1, n2), (n_t / 2, n_t / 2));
        }
        assert!(optimize_within_treatment(&h, 1).is_err());
    }

    #[test]
    fn within_treatment_matches_scan() {
        let h = Hyperparams::from_gap(0.1, 1.25, 1.0).unwrap();
        for n_t in [2, 3, 57, 300] {
            let (n1, _, v) = optimize_within_treatment(&h, n_t).unwrap();
            let scan = (1..n_t)
                .map(|k| (mse_treatment(&h, k, n_t - k).unwrap(), k))
                .fold((f64::INFINITY, 0), |b, c| if c.0 < b.0 { c } else { b });
            assert_eq!((v, n1), scan);
        }
    }

    #[test]
    fn within_treatment_ratio_trend() {
        let share: Vec<f64> = [0.8, 1.0, 1.25]
            .iter()
            .map(|&rho| {
                let h = Hyperparams::from_gap(0.1, rho, 1.0).unwrap();
                let (n1, _, _) = optimize_within_treatment(&h, 533).unwrap();
                n1 as f64 / 533.0
            })
            .collect();
        assert!(share[0] > share[1] && share[1] > share[2], "{share:?}");
    }

    #[test]
    fn oracle_matches_brute_force_small_budgets() {
        for &(delta, rho, s0) in &[(0.0, 1.0, 1.0), (0.1, 0.8, 1.0), (0.15, 1.25, 2.0), (-0.3, 1.5, 0.5)] {
            let h = Hyperparams::from_gap(delta, rho, s0).unwrap();
            for total in [3, 4, 17, 30, 60] {
                let got = solve_oracle_allocation(&h, total).unwrap();
                let (want, v) = brute_force(&h, total);
                assert_eq!(got, want, "delta={delta} rho={rho} T={total}");
                assert_eq!(oracle_mse(&h, &got).unwrap(), v);
            }
        }
    }

    #[test]
    fn oracle_symmetric_null() {
        let h = Hyperparams::new([0.0; 3], [1.0; 3]).unwrap();
        let a = solve_oracle_allocation(&h, 300).unwrap();
        assert_eq!(a.n[1], a.n[2]);
        assert!(solve_oracle_allocation(&h, 2).is_err());
    }

    #[test]
    fn oracle_large_gap_is_neyman() {
        let h = Hyperparams::new([0.0, 0.0, 50.0], [1.0, 1.0, 4.0]).unwrap();
        let a = solve_oracle_allocation(&h, 600).unwrap();
        // Neyman: σ0 = 1, σ2 = 2 over the 599 units left after n1 = 1
        assert_eq!(a.n[1], 1);
        assert!((a.n[0] as f64 - 599.0 / 3.0).abs() <= 2.0, "{a:?}");
        assert!((a.n[2] as f64 - 599.0 * 2.0 / 3.0).abs() <= 2.0, "{a:?}");
    }

    #[test]
    fn coarse_search_agrees_with_exhaustive() {
        let h = Hyperparams::from_gap(0.1, 0.8, 1.0).unwrap();
        let exhaustive = solve_oracle_allocation_with(&h, 900, EstimatorKind::Debiased, &SearchStrategy::exhaustive()).unwrap();
        let default = solve_oracle_allocation_with(&h, 900, EstimatorKind::Debiased, &SearchStrategy::default()).unwrap();
        let fast = solve_oracle_allocation_with(&h, 900, EstimatorKind::Debiased, &SearchStrategy::fast()).unwrap();
        assert_eq!(default, exhaustive);
        assert_eq!(fast, exhaustive);
    }

    #[test]
    fn plug_in_identity_with_empty_pilot() {
        let h = Hyperparams::from_gap(0.15, 1.25, 1.0).unwrap();
        let stats = ArmStats {
            count: [0; 3],
            mean: h.mu,
            var_hat: h.sigma2.map(Some),
        };
        for total in [30, 200, 700] {
            let adaptive = solve_adaptive_allocation(&stats, &Allocation::default(), total, None).unwrap();
            assert_eq!(adaptive, solve_oracle_allocation(&h, total).unwrap());
        }
    }

    #[test]
    fn clipped_domain_respected() {
        let h = Hyperparams::new([0.0, 0.0, 3.0], [1.0, 1.0, 1.0]).unwrap();
        let stats = ArmStats {
            count: [10; 3],
            mean: h.mu,
            var_hat: h.sigma2.map(Some),
        };
        let pilot = Allocation::new(10, 10, 10);
        let clip = ClipDomain::for_budget(0.25, 1000).unwrap();
        let a = solve_adaptive_allocation(&stats, &pilot, 970, Some(&clip)).unwrap();
        let min = clip.min_count(970);
        assert_eq!(min, (970.0 * 0.5 * 1000f64.powf(-0.25)).ceil() as u64);
        assert!(a.n.iter().all(|&n| n >= min), "{a:?} min {min}");
        assert_eq!(a.total(), 970);
        // without the clip the hopeless arm gets a single unit
        let free = solve_adaptive_allocation(&stats, &pilot, 970, None).unwrap();
        assert_eq!(free.n[1], 1);
    }

    #[test]
    fn top_up_example() {
        let post = top_up(&Allocation::new(36, 24, 60), &Allocation::new(10, 10, 10)).unwrap();
        assert_eq!(post, Allocation::new(26, 14, 50));
        assert!(top_up(&Allocation::new(5, 24, 60), &Allocation::new(10, 10, 10)).is_err());
    }

    #[test]
    fn neyman_examples() {
        assert_eq!(neyman_allocation(1.0, 1.0).unwrap().p_star, [0.5, 0.0, 0.5]);
        assert_eq!(neyman_allocation(1.0, 3.0).unwrap().p_star, [0.25, 0.0, 0.75]);
        let p = neyman_allocation(2.0, 1.0).unwrap().p_star;
        assert_relative_eq!(p[0], 2.0 / 3.0);
        assert_relative_eq!(p[2], 1.0 / 3.0);
        assert!(neyman_allocation(0.0, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fast_search_finds_exhaustive_optimum(
            d in -0.4f64..0.4,
            v in prop::array::uniform3(0.2f64..3.0),
            m in prop::array::uniform3(2u64..60),
            post in 100u64..700,
        ) {
            let h = Hyperparams::new([0.0, 0.0, d], v).unwrap();
            let pilot = Allocation { n: m };
            for kind in [EstimatorKind::Debiased, EstimatorKind::Uncorrected] {
                let (_, best) = solve_plugin_allocation(kind, &h, &pilot, post, None, &SearchStrategy::exhaustive()).unwrap();
                let (_, fast) = solve_plugin_allocation(kind, &h, &pilot, post, None, &SearchStrategy::fast()).unwrap();
                prop_assert!(fast <= best * (1.0 + 1e-9), "fast {fast} exhaustive {best}");
            }
        }

        #[test]
        fn top_up_never_below_pilot(
            d in -0.5f64..0.5,
            m in prop::array::uniform3(2u64..40),
            post in 3u64..300,
        ) {
            let h = Hyperparams::new([0.0, 0.0, d], [1.0, 0.5, 0.5]).unwrap();
            let pilot = Allocation { n: m };
            let (a, _) = solve_plugin_allocation(EstimatorKind::Debiased, &h, &pilot, post, None, &SearchStrategy::default()).unwrap();
            prop_assert_eq!(a.total(), post);
            let full = a.plus(&pilot);
            for w in 0..3 {
                prop_assert!(full.n[w] > m[w]);
            }
        }
    }
}
