//! Self-check suites comparing closed forms with seeded Monte Carlo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{Batch, NormalSource};
use crate::error::{Error, Result};
use crate::estimator::{bias_term, GapRule};
use crate::gaussian::{cdf, trunc_mean, trunc_second_moment, GaussPair};
use crate::model::{Allocation, Arm, ClipDomain, Hyperparams};
use crate::objective::{oracle_mse, VARIANCE_FLOOR};
use crate::optimizer::{neyman_allocation, solve_adaptive_allocation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemma,
    Bias,
    Mse,
    Convergence,
    Selection,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemma" => Ok(Suite::Lemma),
            "bias" => Ok(Suite::Bias),
            "mse" => Ok(Suite::Mse),
            "convergence" => Ok(Suite::Convergence),
            "selection" => Ok(Suite::Selection),
            _ => Err(Error::Domain(format!("unknown suite `{s}`"))),
        }
    }
}

/// One comparison. `deviation` and `tolerance` share units: Monte Carlo
/// standard errors for stochastic checks, absolute for exact ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn within_se(name: String, observed: f64, expected: f64, se: f64, k: f64) -> Self {
        let deviation = (observed - expected).abs() / se;
        Self {
            name,
            observed,
            expected,
            deviation,
            tolerance: k,
            passed: deviation <= k,
        }
    }

    fn exact(name: String, observed: f64, expected: f64, tol: f64) -> Self {
        let deviation = (observed - expected).abs();
        Self {
            name,
            observed,
            expected,
            deviation,
            tolerance: tol,
            passed: deviation <= tol,
        }
    }

    fn condition(name: String, observed: f64, expected: f64, passed: bool) -> Self {
        Self {
            name,
            observed,
            expected,
            deviation: if passed { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed,
        }
    }
}

/// Sample sizes of the stochastic suites.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationScale {
    pub draws: u64,
    pub convergence_replications: u64,
}

impl Default for ValidationScale {
    fn default() -> Self {
        Self {
            draws: 1_000_000,
            convergence_replications: 200,
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64, scale: &ValidationScale) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match suite {
        Suite::Lemma => lemma(&mut rng, scale.draws),
        Suite::Bias => bias(&mut rng, scale.draws),
        Suite::Mse => mse(&mut rng, scale.draws),
        Suite::Convergence => convergence(seed, scale.convergence_replications),
        Suite::Selection => selection(&mut rng, scale.draws),
    }
}

/// Running mean and standard error.
#[derive(Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn se(&self) -> f64 {
        let m = self.mean();
        ((self.sum_sq / self.n - m * m).max(0.0) * self.n / (self.n - 1.0) / self.n).sqrt()
    }
}

fn normal(rng: &mut ChaCha8Rng, mu: f64, var: f64) -> f64 {
    mu + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

fn lemma(rng: &mut ChaCha8Rng, draws: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for i in 0..20 {
        let p = GaussPair::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.2..2.0),
            rng.random_range(0.2..2.0),
        )?;
        let a = rng.random_range(-1.0..1.0);
        let b = rng.random_range(-1.0..1.0);
        let mut first = Moments::default();
        let mut second = Moments::default();
        for _ in 0..draws {
            let x = normal(rng, p.mu_x, p.var_x);
            let y = normal(rng, p.mu_y, p.var_y);
            if x > y + a {
                first.push(x);
                second.push((x + b) * (x + b));
            }
        }
        out.push(Check::within_se(format!("config {i}: E[X | X > Y + a]"), first.mean(), trunc_mean(&p, a)?, first.se(), 3.0));
        out.push(Check::within_se(
            format!("config {i}: E[(X + b)^2 | X > Y + a]"),
            second.mean(),
            trunc_second_moment(&p, a, b)?,
            second.se(),
            3.0,
        ));
    }
    Ok(out)
}

fn bias(rng: &mut ChaCha8Rng, draws: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let a = Allocation::new(1, 20, 30);
    for delta in [0.0, 0.1, 0.5] {
        for ratio in [0.8, 1.25] {
            let h = Hyperparams::from_gap(delta, ratio, 1.0)?;
            let s = [0.0, h.sigma2[1] / 20.0, h.sigma2[2] / 30.0];
            let mut cond = [Moments::default(), Moments::default()];
            for _ in 0..draws {
                let m1 = normal(rng, h.mu[1], s[1]);
                let m2 = normal(rng, h.mu[2], s[2]);
                if m2 > m1 {
                    cond[1].push(m2 - h.mu[2]);
                } else {
                    cond[0].push(m1 - h.mu[1]);
                }
            }
            for (g, arm) in cond.iter().zip(Arm::TREATMENTS) {
                out.push(Check::within_se(
                    format!("delta {delta}, ratio {ratio}, winner {arm}: conditional bias"),
                    g.mean(),
                    bias_term(&h, &a, arm)?,
                    g.se(),
                    3.0,
                ));
            }
        }
    }
    Ok(out)
}

fn mse(rng: &mut ChaCha8Rng, draws: u64) -> Result<Vec<Check>> {
    let points = [
        (0.0, 1.0, Allocation::new(100, 100, 100)),
        (0.1, 0.8, Allocation::new(50, 40, 60)),
        (-0.2, 1.25, Allocation::new(30, 20, 25)),
        (0.15, 1.25, Allocation::new(80, 30, 90)),
    ];
    let mut out = Vec::new();
    for (delta, ratio, a) in points {
        let h = Hyperparams::from_gap(delta, ratio, 1.0)?;
        let closed = oracle_mse(&h, &a)?;
        let best = h.best_treatment();
        let b = [0.0, bias_term(&h, &a, Arm::Treatment1)?, bias_term(&h, &a, Arm::Treatment2)?];
        let s = [h.sigma2[0] / a.n[0] as f64, h.sigma2[1] / a.n[1] as f64, h.sigma2[2] / a.n[2] as f64];
        let batches = 100u64;
        let per = draws / batches;
        let mut sq = Moments::default();
        let mut decomposition = Moments::default();
        for _ in 0..batches {
            let mut mis = 0.0;
            let mut groups = [Moments::default(), Moments::default()];
            for _ in 0..per {
                let m = [normal(rng, h.mu[0], s[0]), normal(rng, h.mu[1], s[1]), normal(rng, h.mu[2], s[2])];
                let w = if m[2] > m[1] { 2 } else { 1 };
                let est = m[w] - m[0] - b[w];
                let err = est - h.tau(best);
                sq.push(err * err);
                if w != best.index() {
                    mis += 1.0;
                }
                groups[w - 1].push(est);
            }
            let n = per as f64;
            let ecv: f64 = groups
                .iter()
                .filter(|g| g.n >= 2.0)
                .map(|g| g.n / n * (g.sum_sq - g.sum * g.sum / g.n) / (g.n - 1.0))
                .sum();
            decomposition.push(delta * delta * mis / n + ecv);
        }
        out.push(Check::within_se(format!("delta {delta}, ratio {ratio}, {:?}: MSE", a.n), sq.mean(), closed, sq.se(), 3.0));
        out.push(Check::within_se(
            format!("delta {delta}, ratio {ratio}, {:?}: mis-selection plus conditional variance", a.n),
            decomposition.mean(),
            closed,
            decomposition.se(),
            3.0,
        ));
    }
    Ok(out)
}

/// Median distance between realized post-pilot proportions and the Neyman
/// target for each budget, with `T0 = T^(4/7)` and clip exponent 1/4.
pub fn convergence_medians(seed: u64, replications: u64, budgets: &[u64]) -> Result<Vec<f64>> {
    let h = Hyperparams::from_gap(0.15, 1.25, 1.0)?;
    let target = neyman_allocation(h.sd(Arm::Control), h.sd(Arm::Treatment2))?.in_arm_order(Arm::Treatment2)?;
    let mut medians = Vec::new();
    for (k, &total) in budgets.iter().enumerate() {
        let t0 = (total as f64).powf(4.0 / 7.0).round() as u64;
        let pilot = Allocation::equal(t0);
        let post_budget = total - t0;
        let clip = ClipDomain::for_budget(0.25, total)?;
        let mut dist = Vec::with_capacity(replications as usize);
        for rep in 0..replications {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep | (k as u64) << 32);
            let mut source = NormalSource::new(&h)?;
            let batch = Batch::draw(&mut source, &pilot, &mut rng)?;
            batch.stats.plugin(VARIANCE_FLOOR)?;
            let a = solve_adaptive_allocation(&batch.stats, &pilot, post_budget, Some(&clip))?;
            let d: f64 = (0..3)
                .map(|w| (a.n[w] as f64 / post_budget as f64 - target[w]).powi(2))
                .sum::<f64>()
                .sqrt();
            dist.push(d);
        }
        dist.sort_by(f64::total_cmp);
        let n = dist.len();
        medians.push(if n % 2 == 1 { dist[n / 2] } else { 0.5 * (dist[n / 2 - 1] + dist[n / 2]) });
    }
    Ok(medians)
}

fn convergence(seed: u64, replications: u64) -> Result<Vec<Check>> {
    let budgets = [1_000, 10_000, 100_000];
    let med = convergence_medians(seed, replications, &budgets)?;
    let mut out: Vec<Check> = budgets
        .iter()
        .zip(&med)
        .map(|(t, m)| Check::condition(format!("T = {t}: median ||p_hat - p*||"), *m, f64::NAN, m.is_finite()))
        .collect();
    for i in 1..med.len() {
        out.push(Check::condition(
            format!("median decreases from T = {} to T = {}", budgets[i - 1], budgets[i]),
            med[i],
            med[i - 1],
            med[i] < med[i - 1],
        ));
    }
    Ok(out)
}

/// Worst-case error of the sign rule and of a banded alternative over
/// `|Δ| ∈ [0.1, 1]`, when a positive gap is estimated with `n = (199, 1)`
/// and a negative one with `n = (100, 100)` (unit variances).
pub fn counterexample_errors() -> (f64, f64) {
    let grid: Vec<f64> = (0..=900)
        .map(|i| 0.1 + 0.001 * f64::from(i))
        .flat_map(|d| [d, -d])
        .collect();
    let v = |d: f64| if d >= 0.0 { 1.0 / 199.0 + 1.0 } else { 0.02 };
    let sign = GapRule::sign().worst_case_error(&grid, v).0;
    let banded = GapRule {
        select_second: vec![(0.0, f64::INFINITY), (f64::NEG_INFINITY, -1.1)],
    };
    (sign, banded.worst_case_error(&grid, v).0)
}

fn selection(rng: &mut ChaCha8Rng, draws: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let s = 0.5 / 200.0;
    let mut hits = Moments::default();
    for _ in 0..draws {
        let m1 = normal(rng, 0.0, s);
        let m2 = normal(rng, 0.1, s);
        hits.push(if m2 > m1 { 1.0 } else { 0.0 });
    }
    out.push(Check::within_se(
        "equal allocation n = 200, delta 0.1: selection rate".into(),
        hits.mean(),
        cdf(0.1 / (2.0 * s).sqrt()),
        hits.se(),
        3.0,
    ));
    let (sign, banded) = counterexample_errors();
    let sd = (1.0 + 1.0 / 199.0f64).sqrt();
    out.push(Check::exact("sign rule worst-case error".into(), sign, cdf(-0.1 / sd), 1e-12));
    out.push(Check::exact(
        "banded rule worst-case error".into(),
        banded,
        cdf(-0.1 / sd) - cdf(-1.2 / sd),
        1e-12,
    ));
    out.push(Check::condition("banded rule is strictly better".into(), banded, sign, banded < sign));
    Ok(out)
}
