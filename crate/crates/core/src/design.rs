//! The two-stage adaptive design and fixed-allocation designs, run against
//! an abstract source of outcomes.

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{debias, mean_and_var, select_winner, selection_bias};
use crate::model::{Allocation, Arm, ArmStats, ClipDomain, DesignOutcome, Hyperparams, TwoStagePlan};
use crate::objective::{EstimatorKind, VARIANCE_FLOOR};
use crate::optimizer::{solve_oracle_allocation, solve_plugin_allocation, SearchStrategy};

/// Anything that can hand out outcomes for an arm.
pub trait OutcomeSource {
    fn draw(&mut self, arm: Arm, count: u64, rng: &mut dyn RngCore) -> Result<Vec<f64>>;
}

/// Independent normal outcomes `N(μ_w, σ_w²)`.
#[derive(Clone, Debug)]
pub struct NormalSource {
    dists: [Normal<f64>; 3],
}

impl NormalSource {
    pub fn new(h: &Hyperparams) -> Result<Self> {
        let make = |w: usize| {
            Normal::new(h.mu[w], h.sigma2[w].sqrt()).map_err(|e| Error::Domain(format!("arm {w}: {e}")))
        };
        Ok(Self {
            dists: [make(0)?, make(1)?, make(2)?],
        })
    }
}

impl OutcomeSource for NormalSource {
    fn draw(&mut self, arm: Arm, count: u64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let d = &self.dists[arm.index()];
        Ok((0..count).map(|_| d.sample(rng)).collect())
    }
}

/// Every draw from arm `w` returns `values[w]`.
#[derive(Clone, Copy, Debug)]
pub struct ConstantSource {
    pub values: [f64; 3],
}

impl OutcomeSource for ConstantSource {
    fn draw(&mut self, arm: Arm, count: u64, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(vec![self.values[arm.index()]; count as usize])
    }
}

/// Hyperparameters fed to the bias term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "hyperparams")]
pub enum BiasParams {
    /// Pilot means and variances.
    #[default]
    PilotEstimates,
    TrueHyperparams(Hyperparams),
}

/// Knobs of the two-stage run beyond budgets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    /// Estimator whose plug-in MSE drives the post-pilot allocation.
    pub objective: EstimatorKind,
    /// Subtract the bias term from the raw estimate.
    pub debias: bool,
    pub bias_params: BiasParams,
    pub clip: Option<ClipDomain>,
    pub strategy: SearchStrategy,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            objective: EstimatorKind::Debiased,
            debias: true,
            bias_params: BiasParams::PilotEstimates,
            clip: None,
            strategy: SearchStrategy::default(),
        }
    }
}

impl DesignOptions {
    /// The same pipeline with no correction and an allocation tuned for the
    /// raw estimator.
    pub fn uncorrected() -> Self {
        Self {
            objective: EstimatorKind::Uncorrected,
            debias: false,
            ..Self::default()
        }
    }
}

/// Everything a two-stage run produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub outcome: DesignOutcome,
    pub plan: TwoStagePlan,
    pub pilot_stats: ArmStats,
    pub post_stats: ArmStats,
}

/// Per-arm statistics plus raw sums of one batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Batch {
    pub stats: ArmStats,
    pub sums: [f64; 3],
}

impl Batch {
    pub(crate) fn draw(source: &mut dyn OutcomeSource, a: &Allocation, rng: &mut dyn RngCore) -> Result<Self> {
        let mut stats = ArmStats {
            count: [0; 3],
            mean: [f64::NAN; 3],
            var_hat: [None; 3],
        };
        let mut sums = [0.0; 3];
        for arm in Arm::ALL {
            let w = arm.index();
            let xs = source.draw(arm, a.n[w], rng)?;
            let (n, mean, var) = mean_and_var(&xs);
            stats.count[w] = n;
            stats.mean[w] = mean;
            stats.var_hat[w] = var;
            sums[w] = xs.iter().sum();
        }
        Ok(Self { stats, sums })
    }
}

/// Pooled means `Σx / (m + n)` and pilot shares `m / (m + n)` of two batches.
pub(crate) fn pool(first: &Batch, second: &Batch) -> Result<([f64; 3], [f64; 3])> {
    let mut means = [0.0; 3];
    let mut omega = [0.0; 3];
    for w in 0..3 {
        let m = first.stats.count[w];
        let total = m + second.stats.count[w];
        if total == 0 {
            return Err(Error::Precondition(format!("arm {w} has no observations in either stage")));
        }
        means[w] = (first.sums[w] + second.sums[w]) / total as f64;
        omega[w] = m as f64 / total as f64;
    }
    Ok((means, omega))
}

/// Winner, raw estimate and bias term from final means.
pub(crate) fn finish(
    means: [f64; 3],
    omega: [f64; 3],
    bias: Option<(&Hyperparams, Allocation)>,
    variance_floored: bool,
    rng: &mut dyn RngCore,
) -> Result<DesignOutcome> {
    let sel = select_winner(means[1], means[2], rng)?;
    let tau_raw = means[sel.winner.index()] - means[0];
    let bias_term = match bias {
        Some((h, eff)) => {
            if eff.n[1] == 0 || eff.n[2] == 0 {
                return Err(Error::Precondition("bias term needs both treatments sampled".into()));
            }
            selection_bias(
                h.delta(),
                h.sigma2[1] / eff.n[1] as f64,
                h.sigma2[2] / eff.n[2] as f64,
                sel.winner,
            )
        }
        None => 0.0,
    };
    Ok(DesignOutcome {
        winner: sel.winner,
        tau_raw,
        bias_term,
        tau_debiased: debias(tau_raw, bias_term),
        pooled_means: means,
        omega,
        tie_broken: sel.tie_broken,
        variance_floored,
    })
}

/// Pilot of `pilot` units, plug-in allocation of the remaining
/// `total_budget − T0` units, then pooled estimation and correction.
pub fn run_two_stage(
    source: &mut dyn OutcomeSource,
    total_budget: u64,
    pilot: &Allocation,
    rng: &mut dyn RngCore,
    opts: &DesignOptions,
) -> Result<TwoStageReport> {
    if let Some(w) = pilot.n.iter().position(|&m| m < 2) {
        return Err(Error::Precondition(format!(
            "pilot arm {w} has {} units; at least 2 are needed",
            pilot.n[w]
        )));
    }
    if total_budget < pilot.total() + 3 {
        return Err(Error::Infeasible(format!(
            "total budget {total_budget} leaves fewer than 3 post-pilot units after a pilot of {}",
            pilot.total()
        )));
    }
    let post_budget = total_budget - pilot.total();

    let first = Batch::draw(source, pilot, rng)?;
    let (h_hat, floored) = first.stats.plugin(VARIANCE_FLOOR)?;
    let (post, _) = solve_plugin_allocation(opts.objective, &h_hat, pilot, post_budget, opts.clip.as_ref(), &opts.strategy)?;
    let plan = TwoStagePlan::new(*pilot, total_budget, post)?;

    let second = Batch::draw(source, &post, rng)?;
    let (means, omega) = pool(&first, &second)?;
    let bias_h = match &opts.bias_params {
        BiasParams::PilotEstimates => h_hat,
        BiasParams::TrueHyperparams(h) => *h,
    };
    let bias = opts.debias.then_some((&bias_h, plan.combined()));
    let outcome = finish(means, omega, bias, floored, rng)?;
    Ok(TwoStageReport {
        outcome,
        plan,
        pilot_stats: first.stats,
        post_stats: second.stats,
    })
}

/// Correction applied by a single-batch design.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FixedBias {
    None,
    /// Known hyperparameters.
    Known(Hyperparams),
    /// Means and variances of the batch itself.
    Plugin,
}

/// One batch at a fixed allocation, winner by the larger mean.
pub fn run_fixed_allocation(
    source: &mut dyn OutcomeSource,
    allocation: &Allocation,
    rng: &mut dyn RngCore,
    bias: FixedBias,
) -> Result<(DesignOutcome, ArmStats)> {
    if allocation.n.contains(&0) {
        return Err(Error::Precondition(format!(
            "every arm needs at least one unit, got {:?}",
            allocation.n
        )));
    }
    let batch = Batch::draw(source, allocation, rng)?;
    let (h, floored) = match bias {
        FixedBias::None => (None, false),
        FixedBias::Known(h) => (Some(h), false),
        FixedBias::Plugin => {
            let (h, f) = batch.stats.plugin(VARIANCE_FLOOR)?;
            (Some(h), f)
        }
    };
    let outcome = finish(
        batch.stats.mean,
        [0.0; 3],
        h.as_ref().map(|h| (h, *allocation)),
        floored,
        rng,
    )?;
    Ok((outcome, batch.stats))
}

/// The design with known hyperparameters: oracle allocation, one batch,
/// correction from the true parameters.
pub fn run_oracle_design(
    source: &mut dyn OutcomeSource,
    h: &Hyperparams,
    total_budget: u64,
    rng: &mut dyn RngCore,
) -> Result<DesignOutcome> {
    let a = solve_oracle_allocation(h, total_budget)?;
    run_fixed_allocation(source, &a, rng, FixedBias::Known(*h)).map(|(o, _)| o)
}
