//! Finite-population replay: outcomes are drawn without replacement from a
//! records file instead of a parametric model.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::design::OutcomeSource;
use crate::error::{Error, Result};
use crate::estimator::mean_and_var;
use crate::model::{Allocation, Arm, Hyperparams};
use crate::optimizer::solve_oracle_allocation;
use crate::simulator::{
    run_method, run_replicates, substream, summarize, Method, MethodContext, MetricsRecord, Panel, Replicate, SearchPreset,
    SsSeMode, Summary, CSV_HEADER,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub label: String,
    pub outcome: f64,
}

/// Labelled outcomes with a label-to-arm mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSet {
    pub records: Vec<Record>,
    pub arm_map: BTreeMap<String, Arm>,
}

impl RecordSet {
    /// Checks that every label maps and every arm has at least one record.
    pub fn new(records: Vec<Record>, arm_map: BTreeMap<String, Arm>) -> Result<Self> {
        let rs = Self { records, arm_map };
        for (i, r) in rs.records.iter().enumerate() {
            if !rs.arm_map.contains_key(&r.label) {
                return Err(Error::UnmappedLabel {
                    line: i as u64 + 2,
                    label: r.label.clone(),
                });
            }
        }
        let counts = rs.counts();
        if let Some(w) = counts.n.iter().position(|&c| c == 0) {
            return Err(Error::Domain(format!("arm {w} has no records")));
        }
        Ok(rs)
    }

    pub fn arm_of(&self, label: &str) -> Option<Arm> {
        self.arm_map.get(label).copied()
    }

    pub fn outcomes(&self, arm: Arm) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| self.arm_map[&r.label] == arm)
            .map(|r| r.outcome)
            .collect()
    }

    pub fn counts(&self) -> Allocation {
        let mut n = [0u64; 3];
        for r in &self.records {
            if let Some(a) = self.arm_map.get(&r.label) {
                n[a.index()] += 1;
            }
        }
        Allocation { n }
    }

    /// Arm means and `(n − 1)` variances of the whole population.
    pub fn population(&self) -> Result<Hyperparams> {
        let mut mu = [0.0; 3];
        let mut sigma2 = [0.0; 3];
        for arm in Arm::ALL {
            let (_, m, v) = mean_and_var(&self.outcomes(arm));
            mu[arm.index()] = m;
            sigma2[arm.index()] = v.filter(|&v| v > 0.0).ok_or_else(|| {
                Error::Domain(format!("arm {arm} needs two distinct outcomes for a population variance"))
            })?;
        }
        Hyperparams::new(mu, sigma2)
    }
}

/// Parses `label=idx,label=idx,...`.
pub fn parse_arm_map(entries: &str) -> Result<BTreeMap<String, Arm>> {
    let mut map = BTreeMap::new();
    for part in entries.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, idx) = part
            .split_once('=')
            .ok_or_else(|| Error::Domain(format!("arm map entry `{part}` is not label=index")))?;
        let idx: u8 = idx
            .trim()
            .parse()
            .map_err(|_| Error::Domain(format!("arm map entry `{part}` has a non-numeric index")))?;
        let arm = Arm::try_from(idx)?;
        if map.insert(label.trim().to_string(), arm).is_some() {
            return Err(Error::Domain(format!("label `{label}` is mapped twice")));
        }
    }
    if map.is_empty() {
        return Err(Error::Domain("arm map is empty".into()));
    }
    Ok(map)
}

/// Reads an `arm,outcome` CSV. Errors name the offending line (the header is
/// line 1).
pub fn read_records<R: Read>(input: R, arm_map: &BTreeMap<String, Arm>) -> Result<RecordSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["arm", "outcome"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `arm,outcome`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let label = row.get(0).unwrap_or_default();
        let raw = row.get(1).unwrap_or_default();
        if label.is_empty() || raw.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty field".into(),
            });
        }
        let outcome: f64 = raw.parse().map_err(|_| Error::Parse {
            line,
            message: format!("outcome `{raw}` is not a number"),
        })?;
        if !outcome.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("outcome `{raw}` is not finite"),
            });
        }
        if !arm_map.contains_key(label) {
            return Err(Error::UnmappedLabel {
                line,
                label: label.to_string(),
            });
        }
        records.push(Record {
            label: label.to_string(),
            outcome,
        });
    }
    RecordSet::new(records, arm_map.clone())
}

pub fn load_records(path: impl AsRef<Path>, arm_map: &BTreeMap<String, Arm>) -> Result<RecordSet> {
    read_records(std::fs::File::open(path)?, arm_map)
}

/// Sampling without replacement, one urn per arm.
#[derive(Clone, Debug)]
pub struct FiniteSource {
    urns: [Vec<f64>; 3],
    taken: [usize; 3],
}

pub fn finite_source(rs: &RecordSet) -> FiniteSource {
    FiniteSource {
        urns: [rs.outcomes(Arm::Control), rs.outcomes(Arm::Treatment1), rs.outcomes(Arm::Treatment2)],
        taken: [0; 3],
    }
}

impl FiniteSource {
    pub fn remaining(&self, arm: Arm) -> usize {
        let w = arm.index();
        self.urns[w].len() - self.taken[w]
    }
}

impl OutcomeSource for FiniteSource {
    /// Partial Fisher–Yates over the untouched tail of the urn.
    fn draw(&mut self, arm: Arm, count: u64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let w = arm.index();
        let remaining = self.remaining(arm);
        let k = count as usize;
        if k > remaining {
            return Err(Error::Exhausted {
                arm,
                requested: k,
                remaining,
            });
        }
        let urn = &mut self.urns[w];
        let start = self.taken[w];
        for i in start..start + k {
            let j = rng.random_range(i..urn.len());
            urn.swap(i, j);
        }
        self.taken[w] += k;
        Ok(urn[start..start + k].to_vec())
    }
}

/// Drops one arm and splits another into a control half and a placebo half
/// whose true effect is zero.
///
/// The split arm's records are shuffled; the first `ceil(n/2)` become the
/// control (arm 0) and the rest the pseudo-treatment, labelled
/// `<split>_pseudo`. The kept arm retains its index and the pseudo-treatment
/// takes arm 1, or arm 2 if the kept arm already is arm 1.
pub fn pseudo_treatment_split<R: Rng + ?Sized>(rs: &RecordSet, drop_label: &str, split_label: &str, rng: &mut R) -> Result<RecordSet> {
    for label in [drop_label, split_label] {
        if !rs.arm_map.contains_key(label) {
            return Err(Error::Domain(format!("label `{label}` is not in the record set")));
        }
    }
    if drop_label == split_label {
        return Err(Error::Domain("the dropped and split labels must differ".into()));
    }
    let kept: Vec<(&String, &Arm)> = rs
        .arm_map
        .iter()
        .filter(|(l, _)| l.as_str() != drop_label && l.as_str() != split_label)
        .collect();
    let kept_arm = match kept.as_slice() {
        [(_, a)] => **a,
        _ => {
            return Err(Error::Domain(format!(
                "a pseudo-treatment split needs exactly one other label, found {}",
                kept.len()
            )))
        }
    };
    if kept_arm == Arm::Control {
        return Err(Error::Domain("the kept arm must be a treatment arm".into()));
    }
    let pseudo_arm = kept_arm.rival();
    let pseudo_label = format!("{split_label}_pseudo");
    if rs.arm_map.contains_key(&pseudo_label) {
        return Err(Error::Domain(format!("label `{pseudo_label}` already exists")));
    }

    let mut split: Vec<f64> = rs.records.iter().filter(|r| r.label == split_label).map(|r| r.outcome).collect();
    split.shuffle(rng);
    let n_control = split.len().div_ceil(2);
    let mut records: Vec<Record> = rs
        .records
        .iter()
        .filter(|r| r.label != drop_label && r.label != split_label)
        .cloned()
        .collect();
    for (i, x) in split.into_iter().enumerate() {
        let label = if i < n_control { split_label.to_string() } else { pseudo_label.clone() };
        records.push(Record { label, outcome: x });
    }
    let mut arm_map = BTreeMap::new();
    arm_map.insert(kept[0].0.clone(), kept_arm);
    arm_map.insert(split_label.to_string(), Arm::Control);
    arm_map.insert(pseudo_label, pseudo_arm);
    RecordSet::new(records, arm_map)
}

/// Settings of a replay run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub corpus: String,
    pub total: u64,
    pub t0: u64,
    pub replications: u64,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub ss_se_mode: SsSeMode,
    pub search: SearchPreset,
}

/// One row of a replay report: the benchmark metrics plus per-arm
/// conditional summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub corpus: String,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
    /// Variance of the reported estimate across replications.
    pub var_estimate: f64,
    pub sel_count_1: u64,
    pub sel_count_2: u64,
    /// Mean reported estimate among replications that selected each arm.
    pub cond_estimate_1: f64,
    pub cond_estimate_2: f64,
    /// Mean of estimate minus the selected arm's population effect.
    pub cond_bias_1: f64,
    pub cond_bias_2: f64,
}

pub const REPLAY_EXTRA_COLUMNS: [&str; 7] = [
    "var_estimate",
    "sel_count_1",
    "sel_count_2",
    "cond_estimate_1",
    "cond_estimate_2",
    "cond_bias_1",
    "cond_bias_2",
];

impl ReplayRecord {
    fn new(corpus: &str, metrics: MetricsRecord, s: &Summary, reps: &[Replicate]) -> Self {
        let n = reps.len() as f64;
        let mean = reps.iter().map(|r| r.estimate).sum::<f64>() / n;
        let var_estimate = if reps.len() >= 2 {
            reps.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let [g1, g2] = s.groups;
        Self {
            corpus: corpus.to_string(),
            metrics,
            var_estimate,
            sel_count_1: g1.count,
            sel_count_2: g2.count,
            cond_estimate_1: g1.mean_estimate,
            cond_estimate_2: g2.mean_estimate,
            cond_bias_1: g1.mean_cond_error,
            cond_bias_2: g2.mean_cond_error,
        }
    }
}

/// Repeated two-stage experiments on draws without replacement from `rs`.
/// True effects are the population arm means relative to control.
pub fn run_replay(rs: &RecordSet, cfg: &ReplayConfig, workers: usize) -> Result<Vec<ReplayRecord>> {
    if cfg.replications == 0 || cfg.replications >= 1 << 24 {
        return Err(Error::Domain(format!("replications must lie in [1, 2^24), got {}", cfg.replications)));
    }
    if cfg.total >= 1 << 24 {
        return Err(Error::Domain("budget must be below 2^24".into()));
    }
    if cfg.t0 + 3 > cfg.total {
        return Err(Error::Infeasible(format!("T0 = {} leaves fewer than 3 post-pilot units of T = {}", cfg.t0, cfg.total)));
    }
    let h = rs.population()?;
    let oracle = if cfg.methods.contains(&Method::Oracle) {
        Some((h, solve_oracle_allocation(&h, cfg.total)?))
    } else {
        None
    };
    let pilot = Allocation::equal(cfg.t0);
    let ctx = MethodContext {
        total: cfg.total,
        pilot,
        ss_se_mode: cfg.ss_se_mode,
        strategy: cfg.search.strategy(),
        oracle,
    };
    let tau = [0.0, h.tau(Arm::Treatment1), h.tau(Arm::Treatment2)];
    let panel = Panel {
        delta: h.delta(),
        sigma_ratio: h.sd(Arm::Treatment2) / h.sd(Arm::Treatment1),
    };
    let base = finite_source(rs);
    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let reps = run_replicates(cfg.replications, workers, |rep| {
            let mut rng = substream(cfg.seed, rep, cfg.total, method, 0);
            let mut source = base.clone();
            let outcome = run_method(method, &mut source, &ctx, &mut rng)?;
            Ok(Replicate::score(&outcome, tau))
        })?;
        let s = summarize(&reps)?;
        let metrics = MetricsRecord {
            method,
            t: cfg.total,
            t0: cfg.t0,
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
            replications: cfg.replications,
            seed: cfg.seed,
        };
        out.push(ReplayRecord::new(&cfg.corpus, metrics, &s, &reps));
    }
    Ok(out)
}

/// CSV with a leading `corpus` column, the benchmark columns and the
/// per-arm extras.
pub fn write_replay_csv<W: Write>(out: W, records: &[ReplayRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = std::iter::once("corpus")
        .chain(CSV_HEADER)
        .chain(REPLAY_EXTRA_COLUMNS)
        .collect();
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.corpus.clone()];
        row.extend(r.metrics.csv_fields());
        row.extend([
            r.var_estimate.to_string(),
            r.sel_count_1.to_string(),
            r.sel_count_2.to_string(),
            r.cond_estimate_1.to_string(),
            r.cond_estimate_2.to_string(),
            r.cond_bias_1.to_string(),
            r.cond_bias_2.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
