use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use winner_design::model::{Allocation, ArmStats};
use winner_design::optimizer::solve_adaptive_allocation;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_winner-design"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("WINNER_DESIGN_WORKERS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn schema(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name)
}

/// Validates with the reference Python implementation of JSON Schema.
fn assert_valid(doc: &str, schema_name: &str) {
    let dir = tempfile::tempdir().unwrap();
    let doc_path = dir.path().join("doc.json");
    std::fs::write(&doc_path, doc).unwrap();
    let script = "import json, sys, jsonschema\n\
                  jsonschema.validate(json.load(open(sys.argv[1])), json.load(open(sys.argv[2])))";
    let o = Command::new("python3")
        .args(["-c", script])
        .arg(&doc_path)
        .arg(schema(schema_name))
        .output()
        .expect("python3 with jsonschema is needed for schema tests");
    assert!(o.status.success(), "{schema_name}: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL_CONFIG: &str = r#"{
  "schema_version": 1,
  "panels": [{"delta": 0.1, "sigma_ratio": 0.8}, {"delta": 0.15, "sigma_ratio": 1.25}],
  "sigma0_sq": 1.0,
  "T_grid": [60, 90],
  "T0_rule": {"fraction": 0.3333333333333333},
  "replications": 300,
  "master_seed": 11,
  "methods": ["proposal", "proposal_nocorr", "ss_se", "ss_hyper", "nonadaptive", "oracle"]
}"#;

#[test]
fn oracle_alloc_symmetric_at_zero_gap() {
    let o = run(&["oracle-alloc", "--delta", "0", "--sigma0", "1", "--sigma1", "1", "--sigma2", "1", "--T", "300", "--json"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["allocation"][1], v["allocation"][2]);
    assert_eq!(v["allocation"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).sum::<u64>(), 300);
    assert_valid(&stdout(&o), "oracle_alloc.schema.json");
}

#[test]
fn exit_codes() {
    let o = run(&["oracle-alloc", "--delta", "0", "--T", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(run(&["oracle-alloc", "--delta", "0"]).status.code(), Some(2));
    assert_eq!(run(&["oracle-alloc", "--delta", "x", "--T", "30"]).status.code(), Some(2));
    assert_eq!(run(&["validate", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["oracle-alloc", "--delta", "0", "--sigma1", "0", "--T", "30"]).status.code(), Some(1));
}

#[test]
fn simulate_needs_a_seed_somewhere() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_CONFIG.replace("\"master_seed\": 11,", ""));
    let out = dir.path().join("o.csv");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("master_seed"));
}

#[test]
fn config_errors_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"schema_version": 2, "delta": 0.1, "sigma0_sq": -1, "T_grid": [], "bogus": 1,
                   "T0_rule": {"fraction": 0.3}, "replications": 10, "master_seed": 1, "methods": ["proposal"]}"#;
    let cfg = write_config(dir.path(), body);
    let out = dir.path().join("o.csv");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    for needle in ["schema_version", "sigma_ratio", "sigma0_sq", "T_grid", "bogus"] {
        assert!(err.contains(needle), "missing `{needle}` in {err}");
    }
}

#[test]
fn simulate_rows_schema_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let cfg = cfg.to_str().unwrap();
    let mut csvs = Vec::new();
    for (i, workers) in ["1", "8", "1"].iter().enumerate() {
        let out = dir.path().join(format!("o{i}.csv"));
        let o = run(&["simulate", "--config", cfg, "--out", out.to_str().unwrap(), "--workers", workers, "--json"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_valid(&stdout(&o), "simulate.schema.json");
        csvs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 6);

    let out = dir.path().join("reseeded.csv");
    let o = run(&["simulate", "--config", cfg, "--out", out.to_str().unwrap(), "--seed", "12"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(&out).unwrap(), csvs[0]);
}

#[test]
fn workers_default_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let o = bin()
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()])
        .env("WINNER_DESIGN_WORKERS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn shipped_config_matches_schema() {
    let body = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/four_panels_desk.json")).unwrap();
    assert_valid(&body, "sim_config.schema.json");
    assert_valid(SMALL_CONFIG, "sim_config.schema.json");
    winner_design::simulator::SimConfig::from_json_str(&body).unwrap();
}

fn two_stage(extra: &[&str]) -> Value {
    let mut args = vec!["two-stage", "--delta", "0.1", "--sigma2", "1.3", "--T", "240", "--T0", "60", "--json"];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_valid(&stdout(&o), "two_stage.schema.json");
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn two_stage_reproducible_and_no_debias() {
    let a = two_stage(&["--seed", "5"]);
    assert_eq!(a, two_stage(&["--seed", "5"]));
    let raw = two_stage(&["--seed", "5", "--no-debias"]);
    assert_eq!(raw["report"]["outcome"]["bias_term"], 0.0);
    assert_eq!(raw["report"]["outcome"]["tau_raw"], raw["report"]["outcome"]["tau_debiased"]);
    assert_eq!(raw["report"]["outcome"]["tau_raw"], a["report"]["outcome"]["tau_raw"]);
    assert_ne!(a["report"]["outcome"]["bias_term"], 0.0);

    let unseeded = two_stage(&[]);
    assert!(unseeded["seed"].is_u64());
}

#[test]
fn two_stage_plan_matches_adaptive_solver() {
    for seed in ["1", "2", "3"] {
        let v = two_stage(&["--seed", seed]);
        let stats: ArmStats = serde_json::from_value(v["report"]["pilot_stats"].clone()).unwrap();
        let pilot: Allocation = serde_json::from_value(v["report"]["plan"]["pilot"].clone()).unwrap();
        let post: Allocation = serde_json::from_value(v["report"]["plan"]["post"].clone()).unwrap();
        assert_eq!(solve_adaptive_allocation(&stats, &pilot, 180, None).unwrap(), post);
    }
}

#[test]
fn two_stage_text_output() {
    let o = run(&["two-stage", "--delta", "0.1", "--T", "120", "--T0", "30", "--seed", "9"]);
    let text = stdout(&o);
    for key in ["pilot =", "winner =", "tau_hat =", "bias_hat =", "tau_debiased ="] {
        assert!(text.contains(key), "{text}");
    }
}

fn tiny_corpus(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.csv");
    std::fs::write(&p, "arm,outcome\nc,0.1\nc,-0.4\nc,0.3\na,1.0\na,0.2\na,0.7\nb,0.9\nb,1.4\nb,0.5\n").unwrap();
    p
}

#[test]
fn replay_tiny_corpus_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let args = ["replay", "--data", data.to_str().unwrap(), "--map", "c=0,a=1,b=2", "--T", "9", "--T0", "6", "--reps", "20", "--seed", "4",
        "--methods", "proposal,proposal_nocorr,nonadaptive"];
    let first = run(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let text = stdout(&first);
    assert!(text.starts_with("corpus,method,T,T0,"));
    assert_eq!(text.lines().count(), 4);
    assert_eq!(first.stdout, run(&args).stdout);

    let mut with_json = args.to_vec();
    with_json.push("--json");
    let o = run(&with_json);
    assert_valid(&stdout(&o), "replay.schema.json");
}

#[test]
fn replay_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let o = run(&["replay", "--data", data.to_str().unwrap(), "--map", "c=0,a=1,b=2", "--T", "9", "--T0", "6", "--reps", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn replay_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "arm,outcome\nc,0.1\na,oops\n").unwrap();
    let o = run(&["replay", "--data", p.to_str().unwrap(), "--map", "c=0,a=1,b=2", "--T", "9", "--T0", "6", "--reps", "5", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn replay_pseudo_split() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("corpus.csv");
    let mut body = String::from("arm,outcome\n");
    for i in 0..40 {
        body.push_str(&format!("reg,{}\nsmall,{}\naide,{}\n", (i % 7) as f64 * 0.3, 1.0 + (i % 5) as f64 * 0.2, (i % 3) as f64));
    }
    std::fs::write(&p, body).unwrap();
    let base = ["replay", "--data", p.to_str().unwrap(), "--map", "reg=0,small=1,aide=2", "--T", "30", "--T0", "12", "--reps", "10", "--seed", "2",
        "--methods", "proposal"];
    let mut args = base.to_vec();
    args.extend(["--pseudo", "drop=aide,split=reg"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(o.stdout, run(&args).stdout);
    // after the split only 80 records remain
    args[6] = "81";
    assert_eq!(run(&args).status.code(), Some(1));

    let mut bad = base.to_vec();
    bad.extend(["--pseudo", "drop=aide"]);
    assert_eq!(run(&bad).status.code(), Some(1));
}

#[test]
fn validate_reports_and_schema() {
    let o = run(&["validate", "--suite", "selection", "--seed", "3", "--draws", "20000"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
    assert!(text.contains("tolerance"));

    let o = run(&["validate", "--suite", "lemma", "--seed", "3", "--draws", "20000", "--json"]);
    assert_valid(&stdout(&o), "validate.schema.json");
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 40);
}

#[test]
fn validate_convergence_prints_medians() {
    let o = run(&["validate", "--suite", "convergence", "--seed", "3", "--replications", "5"]);
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains("median ||p_hat - p*||")).count(), 3, "{text}");
}
