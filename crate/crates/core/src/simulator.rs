//! Monte Carlo benchmark of the adaptive design against its baselines.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::design::{finish, run_fixed_allocation, run_two_stage, Batch, DesignOptions, FixedBias, NormalSource, OutcomeSource};
use crate::error::{Error, Result};
use crate::estimator::select_winner;
use crate::model::{Allocation, Arm, DesignOutcome, Hyperparams};
use crate::objective::{EstimatorKind, VARIANCE_FLOOR};
use crate::optimizer::{solve_oracle_allocation, solve_plugin_allocation, SearchStrategy};

pub const SCHEMA_VERSION: u32 = 1;
/// Replications per grid point when the full-scale flag is given.
pub const FULL_SCALE_REPLICATIONS: u64 = 500_000;
/// Replications per grid point at desk scale.
pub const DESK_REPLICATIONS: u64 = 20_000;
const SE_BATCHES: usize = 100;

/// Design variants compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposal,
    ProposalNocorr,
    SsSe,
    SsHyper,
    Nonadaptive,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Proposal,
        Method::ProposalNocorr,
        Method::SsSe,
        Method::SsHyper,
        Method::Nonadaptive,
        Method::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposal => "proposal",
            Method::ProposalNocorr => "proposal_nocorr",
            Method::SsSe => "ss_se",
            Method::SsHyper => "ss_hyper",
            Method::Nonadaptive => "nonadaptive",
            Method::Oracle => "oracle",
        }
    }

    fn stream_tag(self) -> u64 {
        Method::ALL.iter().position(|&m| m == self).unwrap() as u64
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown method `{s}`")))
    }
}

/// Where the sample-splitting baseline takes its control mean from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsSeMode {
    /// Control mean from the pilot; the whole post-pilot budget goes to the
    /// selected arm.
    #[default]
    PilotControl,
    /// Post-pilot budget split between the selected arm and control in
    /// proportion to their pilot standard deviations.
    Neyman,
}

/// Search preset used for per-replicate allocation problems.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPreset {
    #[default]
    Fast,
    Standard,
    Exhaustive,
}

impl SearchPreset {
    pub fn strategy(self) -> SearchStrategy {
        match self {
            SearchPreset::Fast => SearchStrategy::fast(),
            SearchPreset::Standard => SearchStrategy::default(),
            SearchPreset::Exhaustive => SearchStrategy::exhaustive(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Panel {
    pub delta: f64,
    /// `σ2/σ1`, with `σ1² + σ2² = 1`.
    pub sigma_ratio: f64,
}

/// Pilot size as a function of the total budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T0Rule {
    /// `round(f · T)`.
    Fraction(f64),
    Fixed(u64),
    /// `round(T^p)`.
    Power(f64),
}

impl T0Rule {
    pub fn pilot_size(&self, total: u64) -> u64 {
        match *self {
            T0Rule::Fraction(f) => (f * total as f64).round() as u64,
            T0Rule::Fixed(t0) => t0,
            T0Rule::Power(p) => (total as f64).powf(p).round() as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotSplit {
    /// Thirds of `T0`, remainder to control.
    #[default]
    Equal,
    Explicit([u64; 3]),
}

impl PilotSplit {
    pub fn allocation(&self, t0: u64) -> Allocation {
        match *self {
            PilotSplit::Equal => Allocation::equal(t0),
            PilotSplit::Explicit(n) => Allocation { n },
        }
    }
}

/// A validated benchmark configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub schema_version: u32,
    pub panels: Vec<Panel>,
    pub sigma0_sq: f64,
    #[serde(rename = "T_grid")]
    pub t_grid: Vec<u64>,
    #[serde(rename = "T0_rule")]
    pub t0_rule: T0Rule,
    pub pilot_split: PilotSplit,
    pub replications: u64,
    pub master_seed: u64,
    pub methods: Vec<Method>,
    pub ss_se_mode: SsSeMode,
    pub search: SearchPreset,
}

const CONFIG_KEYS: [&str; 13] = [
    "schema_version",
    "panels",
    "delta",
    "sigma_ratio",
    "sigma0_sq",
    "T_grid",
    "T0_rule",
    "pilot_split",
    "replications",
    "master_seed",
    "methods",
    "ss_se_mode",
    "search",
];

fn field<T: serde::de::DeserializeOwned>(obj: &serde_json::Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_json::from_value(v.clone()) {
        Ok(x) => Some(x),
        Err(e) => {
            errors.push(format!("`{key}`: {e}"));
            None
        }
    }
}

fn required<T: serde::de::DeserializeOwned>(obj: &serde_json::Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    if !obj.contains_key(key) {
        errors.push(format!("`{key}` is required"));
        return None;
    }
    field(obj, key, errors)
}

impl SimConfig {
    /// Parses and validates a JSON configuration, reporting every problem
    /// found rather than the first.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config(vec!["configuration must be a JSON object".into()]))?;
        let mut errors = Vec::new();
        for key in obj.keys() {
            if !CONFIG_KEYS.contains(&key.as_str()) {
                errors.push(format!("unknown field `{key}`"));
            }
        }
        let schema_version: Option<u32> = required(obj, "schema_version", &mut errors);
        if let Some(v) = schema_version {
            if v != SCHEMA_VERSION {
                errors.push(format!("`schema_version` must be {SCHEMA_VERSION}, got {v}"));
            }
        }

        let panels: Option<Vec<Panel>> = match (obj.contains_key("panels"), obj.contains_key("delta") || obj.contains_key("sigma_ratio")) {
            (true, true) => {
                errors.push("give either `panels` or `delta`/`sigma_ratio`, not both".into());
                None
            }
            (true, false) => field(obj, "panels", &mut errors),
            (false, true) => {
                let delta: Option<f64> = required(obj, "delta", &mut errors);
                let sigma_ratio: Option<f64> = required(obj, "sigma_ratio", &mut errors);
                delta.zip(sigma_ratio).map(|(delta, sigma_ratio)| vec![Panel { delta, sigma_ratio }])
            }
            (false, false) => {
                errors.push("`panels` (or `delta` and `sigma_ratio`) is required".into());
                None
            }
        };
        if let Some(ps) = &panels {
            if ps.is_empty() {
                errors.push("`panels` must not be empty".into());
            }
            if ps.len() >= 1 << 12 {
                errors.push("at most 4095 panels are supported".into());
            }
            for (i, p) in ps.iter().enumerate() {
                if !p.delta.is_finite() {
                    errors.push(format!("panels[{i}].delta must be finite"));
                }
                if !(p.sigma_ratio.is_finite() && p.sigma_ratio > 0.0) {
                    errors.push(format!("panels[{i}].sigma_ratio must be positive"));
                }
            }
        }

        let sigma0_sq: Option<f64> = required(obj, "sigma0_sq", &mut errors);
        if let Some(s) = sigma0_sq {
            if !(s.is_finite() && s > 0.0) {
                errors.push(format!("`sigma0_sq` must be positive, got {s}"));
            }
        }
        let t_grid: Option<Vec<u64>> = required(obj, "T_grid", &mut errors);
        if let Some(g) = &t_grid {
            if g.is_empty() {
                errors.push("`T_grid` must not be empty".into());
            }
            if let Some(&t) = g.iter().find(|&&t| t >= 1 << 24) {
                errors.push(format!("`T_grid` entries must be below 2^24, got {t}"));
            }
        }
        let t0_rule: Option<T0Rule> = required(obj, "T0_rule", &mut errors);
        match t0_rule {
            Some(T0Rule::Fraction(f)) if !(f > 0.0 && f < 1.0) => {
                errors.push(format!("`T0_rule.fraction` must lie in (0, 1), got {f}"))
            }
            Some(T0Rule::Power(p)) if !(p > 0.0 && p < 1.0) => {
                errors.push(format!("`T0_rule.power` must lie in (0, 1), got {p}"))
            }
            _ => {}
        }
        let pilot_split: PilotSplit = if obj.contains_key("pilot_split") {
            field(obj, "pilot_split", &mut errors).unwrap_or_default()
        } else {
            PilotSplit::Equal
        };
        if let PilotSplit::Explicit(n) = pilot_split {
            if n.iter().any(|&m| m < 2) {
                errors.push(format!("`pilot_split.explicit` needs at least 2 units per arm, got {n:?}"));
            }
        }
        let replications: Option<u64> = required(obj, "replications", &mut errors);
        if let Some(r) = replications {
            if r == 0 || r >= 1 << 24 {
                errors.push(format!("`replications` must lie in [1, 2^24), got {r}"));
            }
        }
        let master_seed: Option<u64> = required(obj, "master_seed", &mut errors);
        let methods: Option<Vec<Method>> = required(obj, "methods", &mut errors);
        if let Some(ms) = &methods {
            if ms.is_empty() {
                errors.push("`methods` must not be empty".into());
            }
            let mut seen = std::collections::BTreeSet::new();
            for m in ms {
                if !seen.insert(*m) {
                    errors.push(format!("method `{m}` is listed twice"));
                }
            }
        }
        let ss_se_mode: SsSeMode = field(obj, "ss_se_mode", &mut errors).unwrap_or_default();
        let search: SearchPreset = field(obj, "search", &mut errors).unwrap_or_default();

        if let (Some(grid), Some(rule)) = (&t_grid, &t0_rule) {
            for &t in grid {
                let t0 = rule.pilot_size(t);
                let pilot = pilot_split.allocation(t0);
                if pilot.total() != t0 {
                    errors.push(format!("T = {t}: explicit pilot sums to {}, but T0 = {t0}", pilot.total()));
                } else if pilot.n.iter().any(|&m| m < 2) {
                    errors.push(format!("T = {t}: T0 = {t0} leaves a pilot arm with fewer than 2 units"));
                }
                if t0 + 3 > t {
                    errors.push(format!("T = {t}: T0 = {t0} leaves fewer than 3 post-pilot units"));
                }
                if t < 6 {
                    errors.push(format!("T = {t}: budgets below 6 cannot run every method"));
                }
            }
        }

        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Ok(Self {
            schema_version: schema_version.unwrap(),
            panels: panels.unwrap(),
            sigma0_sq: sigma0_sq.unwrap(),
            t_grid: t_grid.unwrap(),
            t0_rule: t0_rule.unwrap(),
            pilot_split,
            replications: replications.unwrap(),
            master_seed: master_seed.unwrap(),
            methods: methods.unwrap(),
            ss_se_mode,
            search,
        })
    }

    pub fn hyperparams(&self, panel: &Panel) -> Result<Hyperparams> {
        Hyperparams::from_gap(panel.delta, panel.sigma_ratio, self.sigma0_sq)
    }
}

/// Per-budget inputs shared by every method.
#[derive(Clone, Copy, Debug)]
pub struct MethodContext {
    pub total: u64,
    pub pilot: Allocation,
    pub ss_se_mode: SsSeMode,
    pub strategy: SearchStrategy,
    /// Hyperparameters and allocation of the known-parameter design.
    pub oracle: Option<(Hyperparams, Allocation)>,
}

/// Proposal with pilot estimates, or its uncorrected variant.
fn method_proposal(source: &mut dyn OutcomeSource, ctx: &MethodContext, kind: EstimatorKind, rng: &mut dyn RngCore) -> Result<DesignOutcome> {
    let opts = match kind {
        EstimatorKind::Debiased => DesignOptions::default(),
        EstimatorKind::Uncorrected => DesignOptions::uncorrected(),
    };
    let opts = DesignOptions {
        strategy: ctx.strategy,
        ..opts
    };
    run_two_stage(source, ctx.total, &ctx.pilot, rng, &opts).map(|r| r.outcome)
}

/// Identical pipeline to the proposal with `b ≡ 0` and the allocation that
/// minimizes the uncorrected estimator's plug-in MSE.
pub fn method_proposal_nocorr(source: &mut dyn OutcomeSource, ctx: &MethodContext, rng: &mut dyn RngCore) -> Result<DesignOutcome> {
    method_proposal(source, ctx, EstimatorKind::Uncorrected, rng)
}

/// Sample splitting: the pilot picks the winner, post-pilot data estimate
/// its effect without correction.
pub fn method_ss_se(source: &mut dyn OutcomeSource, ctx: &MethodContext, rng: &mut dyn RngCore) -> Result<DesignOutcome> {
    check_budget(ctx)?;
    let post_budget = ctx.total - ctx.pilot.total();
    let first = Batch::draw(source, &ctx.pilot, rng)?;
    let sel = select_winner(first.stats.mean[1], first.stats.mean[2], rng)?;
    let w = sel.winner.index();
    let mut means = first.stats.mean;
    let mut omega = [1.0; 3];
    let mut floored = false;
    let post = match ctx.ss_se_mode {
        SsSeMode::PilotControl => {
            let mut n = [0; 3];
            n[w] = post_budget;
            Allocation { n }
        }
        SsSeMode::Neyman => {
            let (h, f) = first.stats.plugin(VARIANCE_FLOOR)?;
            floored = f;
            let s0 = h.sigma2[0].sqrt();
            let sw = h.sigma2[w].sqrt();
            let n0 = ((post_budget as f64 * s0 / (s0 + sw)).round() as u64).clamp(1, post_budget - 1);
            let mut n = [n0, 0, 0];
            n[w] = post_budget - n0;
            Allocation { n }
        }
    };
    let second = Batch::draw(source, &post, rng)?;
    for arm in 0..3 {
        if post.n[arm] > 0 {
            means[arm] = second.stats.mean[arm];
            omega[arm] = 0.0;
        }
    }
    let tau_raw = means[w] - means[0];
    Ok(DesignOutcome {
        winner: sel.winner,
        tau_raw,
        bias_term: 0.0,
        tau_debiased: tau_raw,
        pooled_means: means,
        omega,
        tie_broken: sel.tie_broken,
        variance_floored: floored,
    })
}

/// Pilot used only for hyperparameters: allocation minimizes the post-pilot
/// debiased MSE, and selection, estimation and correction use post-pilot
/// data alone.
pub fn method_ss_hyper(source: &mut dyn OutcomeSource, ctx: &MethodContext, rng: &mut dyn RngCore) -> Result<DesignOutcome> {
    check_budget(ctx)?;
    let post_budget = ctx.total - ctx.pilot.total();
    let first = Batch::draw(source, &ctx.pilot, rng)?;
    let (h, floored) = first.stats.plugin(VARIANCE_FLOOR)?;
    let (post, _) = solve_plugin_allocation(EstimatorKind::Debiased, &h, &Allocation::default(), post_budget, None, &ctx.strategy)?;
    let second = Batch::draw(source, &post, rng)?;
    finish(second.stats.mean, [0.0; 3], Some((&h, post)), floored, rng)
}

/// Equal thirds of the whole budget, corrected with the batch's own
/// estimates.
pub fn method_nonadaptive(source: &mut dyn OutcomeSource, total: u64, rng: &mut dyn RngCore) -> Result<DesignOutcome> {
    if total < 6 {
        return Err(Error::Infeasible(format!("equal allocation needs a budget of at least 6, got {total}")));
    }
    run_fixed_allocation(source, &Allocation::equal(total), rng, FixedBias::Plugin).map(|(o, _)| o)
}

fn check_budget(ctx: &MethodContext) -> Result<()> {
    if let Some(w) = ctx.pilot.n.iter().position(|&m| m < 2) {
        return Err(Error::Precondition(format!("pilot arm {w} has fewer than 2 units")));
    }
    if ctx.total < ctx.pilot.total() + 3 {
        return Err(Error::Infeasible(format!(
            "budget {} leaves fewer than 3 post-pilot units after a pilot of {}",
            ctx.total,
            ctx.pilot.total()
        )));
    }
    Ok(())
}

/// One replicate of `method`.
pub fn run_method(method: Method, source: &mut dyn OutcomeSource, ctx: &MethodContext, rng: &mut dyn RngCore) -> Result<DesignOutcome> {
    match method {
        Method::Proposal => method_proposal(source, ctx, EstimatorKind::Debiased, rng),
        Method::ProposalNocorr => method_proposal_nocorr(source, ctx, rng),
        Method::SsSe => method_ss_se(source, ctx, rng),
        Method::SsHyper => method_ss_hyper(source, ctx, rng),
        Method::Nonadaptive => method_nonadaptive(source, ctx.total, rng),
        Method::Oracle => {
            let (h, a) = ctx
                .oracle
                .ok_or_else(|| Error::Precondition("the oracle method needs known hyperparameters".into()))?;
            run_fixed_allocation(source, &a, rng, FixedBias::Known(h)).map(|(o, _)| o)
        }
    }
}

/// What the metrics need from one replicate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replicate {
    pub winner: Arm,
    pub correct: bool,
    /// Reported estimate minus the best arm's true effect.
    pub error: f64,
    /// Reported estimate minus the selected arm's true effect.
    pub cond_error: f64,
    pub estimate: f64,
}

impl Replicate {
    /// Scores an outcome against true arm effects `tau` (index 0 unused).
    pub fn score(outcome: &DesignOutcome, tau: [f64; 3]) -> Self {
        let best = if tau[2] >= tau[1] { Arm::Treatment2 } else { Arm::Treatment1 };
        let est = outcome.tau_debiased;
        Self {
            winner: outcome.winner,
            correct: outcome.winner == best,
            error: est - tau[best.index()],
            cond_error: est - tau[outcome.winner.index()],
            estimate: est,
        }
    }
}

/// Statistics of the replicates that selected one arm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: u64,
    pub mean_cond_error: f64,
    pub var_estimate: f64,
    pub mean_estimate: f64,
}

/// All metrics with Monte Carlo standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mse: f64,
    pub mse_se: f64,
    pub sel_prob: f64,
    pub sel_prob_se: f64,
    pub max_cond_bias: f64,
    pub max_cond_bias_se: f64,
    pub exp_cond_var: f64,
    pub exp_cond_var_se: f64,
    /// Treatment 1 and treatment 2 groups.
    pub groups: [GroupSummary; 2],
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn batch_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let b = SE_BATCHES.min(n);
    (0..b).map(|i| i * n / b..(i + 1) * n / b).collect()
}

fn groups(reps: &[Replicate]) -> [GroupSummary; 2] {
    let mut out = [GroupSummary::default(); 2];
    for (g, arm) in out.iter_mut().zip(Arm::TREATMENTS) {
        let sel: Vec<&Replicate> = reps.iter().filter(|r| r.winner == arm).collect();
        g.count = sel.len() as u64;
        if sel.is_empty() {
            g.mean_cond_error = f64::NAN;
            g.var_estimate = f64::NAN;
            g.mean_estimate = f64::NAN;
            continue;
        }
        let n = sel.len() as f64;
        g.mean_cond_error = sel.iter().map(|r| r.cond_error).sum::<f64>() / n;
        g.mean_estimate = sel.iter().map(|r| r.estimate).sum::<f64>() / n;
        g.var_estimate = if sel.len() >= 2 {
            sel.iter().map(|r| (r.estimate - g.mean_estimate).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
    }
    out
}

/// Selection-frequency-weighted within-group variance of the estimate.
fn expected_cond_var(reps: &[Replicate]) -> f64 {
    let n = reps.len() as f64;
    groups(reps)
        .iter()
        .filter(|g| g.count >= 2)
        .map(|g| g.count as f64 / n * g.var_estimate)
        .sum()
}

/// Reduces replicates, in index order, to metrics. Standard errors of the
/// MSE, the selection rate and the expected conditional variance come from
/// 100 contiguous batch means; the conditional-bias error is the selected
/// group's standard error of the mean.
pub fn summarize(reps: &[Replicate]) -> Result<Summary> {
    if reps.is_empty() {
        return Err(Error::Precondition("no replicates to summarize".into()));
    }
    let ranges = batch_ranges(reps.len());
    let batch_stat = |f: &dyn Fn(&[Replicate]) -> f64| -> f64 {
        let vals: Vec<f64> = ranges.iter().map(|r| f(&reps[r.clone()])).collect();
        mean_se(&vals).1
    };
    let n = reps.len() as f64;
    let mse = reps.iter().map(|r| r.error * r.error).sum::<f64>() / n;
    let sel_prob = reps.iter().filter(|r| r.correct).count() as f64 / n;
    let mse_se = batch_stat(&|b| b.iter().map(|r| r.error * r.error).sum::<f64>() / b.len() as f64);
    let sel_prob_se = batch_stat(&|b| b.iter().filter(|r| r.correct).count() as f64 / b.len() as f64);
    let exp_cond_var = expected_cond_var(reps);
    let exp_cond_var_se = batch_stat(&expected_cond_var);

    let gs = groups(reps);
    let (mut max_cond_bias, mut max_cond_bias_se) = (f64::NAN, f64::NAN);
    for (g, arm) in gs.iter().zip(Arm::TREATMENTS) {
        if g.count == 0 || (max_cond_bias.is_finite() && g.mean_cond_error.abs() <= max_cond_bias) {
            continue;
        }
        max_cond_bias = g.mean_cond_error.abs();
        let errs: Vec<f64> = reps.iter().filter(|r| r.winner == arm).map(|r| r.cond_error).collect();
        max_cond_bias_se = mean_se(&errs).1;
    }
    Ok(Summary {
        mse,
        mse_se,
        sel_prob,
        sel_prob_se,
        max_cond_bias,
        max_cond_bias_se,
        exp_cond_var,
        exp_cond_var_se,
        groups: gs,
    })
}

/// One row of benchmark output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: Method,
    #[serde(rename = "T")]
    pub t: u64,
    #[serde(rename = "T0")]
    pub t0: u64,
    pub delta: f64,
    pub sigma_ratio: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub sel_prob: f64,
    pub sel_prob_se: f64,
    pub max_cond_bias: f64,
    pub max_cond_bias_se: f64,
    pub exp_cond_var: f64,
    pub exp_cond_var_se: f64,
    pub replications: u64,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 15] = [
    "method",
    "T",
    "T0",
    "delta",
    "sigma_ratio",
    "mse",
    "mse_se",
    "sel_prob",
    "sel_prob_se",
    "max_cond_bias",
    "max_cond_bias_se",
    "exp_cond_var",
    "exp_cond_var_se",
    "replications",
    "seed",
];

impl MetricsRecord {
    fn new(method: Method, t: u64, t0: u64, panel: &Panel, s: &Summary, replications: u64, seed: u64) -> Self {
        Self {
            method,
            t,
            t0,
            delta: panel.delta,
            sigma_ratio: panel.sigma_ratio,
            mse: s.mse,
            mse_se: s.mse_se,
            sel_prob: s.sel_prob,
            sel_prob_se: s.sel_prob_se,
            max_cond_bias: s.max_cond_bias,
            max_cond_bias_se: s.max_cond_bias_se,
            exp_cond_var: s.exp_cond_var,
            exp_cond_var_se: s.exp_cond_var_se,
            replications,
            seed,
        }
    }

    pub(crate) fn csv_fields(&self) -> Vec<String> {
        vec![
            self.method.to_string(),
            self.t.to_string(),
            self.t0.to_string(),
            self.delta.to_string(),
            self.sigma_ratio.to_string(),
            self.mse.to_string(),
            self.mse_se.to_string(),
            self.sel_prob.to_string(),
            self.sel_prob_se.to_string(),
            self.max_cond_bias.to_string(),
            self.max_cond_bias_se.to_string(),
            self.exp_cond_var.to_string(),
            self.exp_cond_var_se.to_string(),
            self.replications.to_string(),
            self.seed.to_string(),
        ]
    }
}

/// Writes records as CSV with the fixed header.
pub fn write_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

/// RNG for one replicate: the master seed keys the generator and the
/// replicate coordinates select an independent ChaCha stream.
pub fn substream(master_seed: u64, rep: u64, budget_key: u64, method: Method, panel: u64) -> ChaCha8Rng {
    debug_assert!(rep < 1 << 24 && budget_key < 1 << 24 && panel < 1 << 12);
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep | budget_key << 24 | method.stream_tag() << 48 | panel << 52);
    rng
}

/// Runs `reps` replicates on a pool of `workers` threads; results come back
/// in replicate order whatever the scheduling.
pub fn run_replicates<F>(reps: u64, workers: usize, f: F) -> Result<Vec<Replicate>>
where
    F: Fn(u64) -> Result<Replicate> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Domain(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..reps).into_par_iter().map(&f).collect())
}

struct GridPoint {
    panel_index: u64,
    panel: Panel,
    h: Hyperparams,
    total: u64,
    t0: u64,
    budget_key: u64,
}

fn run_grid_point(cfg: &SimConfig, gp: &GridPoint, methods: &[Method], replications: u64, workers: usize, oracle_cache: &mut BTreeMap<(u64, u64), Allocation>) -> Result<Vec<MetricsRecord>> {
    let pilot = cfg.pilot_split.allocation(gp.t0);
    let oracle = if methods.contains(&Method::Oracle) {
        let key = (gp.panel_index, gp.total);
        let a = match oracle_cache.get(&key) {
            Some(a) => *a,
            None => {
                let a = solve_oracle_allocation(&gp.h, gp.total)?;
                oracle_cache.insert(key, a);
                a
            }
        };
        Some((gp.h, a))
    } else {
        None
    };
    let ctx = MethodContext {
        total: gp.total,
        pilot,
        ss_se_mode: cfg.ss_se_mode,
        strategy: cfg.search.strategy(),
        oracle,
    };
    let tau = [0.0, gp.h.tau(Arm::Treatment1), gp.h.tau(Arm::Treatment2)];
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let reps = run_replicates(replications, workers, |rep| {
            let mut rng = substream(cfg.master_seed, rep, gp.budget_key, method, gp.panel_index);
            let mut source = NormalSource::new(&gp.h)?;
            let outcome = run_method(method, &mut source, &ctx, &mut rng)?;
            Ok(Replicate::score(&outcome, tau))
        })?;
        let s = summarize(&reps)?;
        out.push(MetricsRecord::new(method, gp.total, gp.t0, &gp.panel, &s, replications, cfg.master_seed));
    }
    Ok(out)
}

/// Every (panel, T, method) cell of the configuration, in that order.
pub fn run_benchmark(cfg: &SimConfig, workers: usize) -> Result<Vec<MetricsRecord>> {
    run_benchmark_with(cfg, cfg.replications, workers)
}

/// As [`run_benchmark`] with the replication count overridden.
pub fn run_benchmark_with(cfg: &SimConfig, replications: u64, workers: usize) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    let mut cache = BTreeMap::new();
    for (i, panel) in cfg.panels.iter().enumerate() {
        let h = cfg.hyperparams(panel)?;
        for &total in &cfg.t_grid {
            let gp = GridPoint {
                panel_index: i as u64,
                panel: *panel,
                h,
                total,
                t0: cfg.t0_rule.pilot_size(total),
                budget_key: total,
            };
            records.extend(run_grid_point(cfg, &gp, &cfg.methods, replications, workers, &mut cache)?);
        }
    }
    Ok(records)
}

/// MSE of the proposal and the hyperparameter-only split across pilot sizes
/// at one fixed budget.
pub fn sweep_t0(cfg: &SimConfig, total: u64, t0_grid: &[u64], workers: usize) -> Result<Vec<MetricsRecord>> {
    let mut errors = Vec::new();
    for &t0 in t0_grid {
        if t0 >= total {
            errors.push(format!("T0 = {t0} must be below T = {total}"));
        } else if t0 + 3 > total || t0 < 6 {
            errors.push(format!("T0 = {t0} is infeasible for T = {total}"));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let methods = [Method::Proposal, Method::SsHyper];
    let mut records = Vec::new();
    let mut cache = BTreeMap::new();
    let sweep_cfg = SimConfig {
        pilot_split: PilotSplit::Equal,
        ..cfg.clone()
    };
    for (i, panel) in cfg.panels.iter().enumerate() {
        let h = cfg.hyperparams(panel)?;
        for &t0 in t0_grid {
            let gp = GridPoint {
                panel_index: i as u64,
                panel: *panel,
                h,
                total,
                t0,
                budget_key: t0,
            };
            records.extend(run_grid_point(&sweep_cfg, &gp, &methods, cfg.replications, workers, &mut cache)?);
        }
    }
    Ok(records)
}
