use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use winner_design::design::{run_two_stage, DesignOptions, NormalSource};
use winner_design::model::{Allocation, Arm, Hyperparams};
use winner_design::optimizer::solve_adaptive_allocation;
use winner_design::replay::{load_records, parse_arm_map};
use winner_design::simulator::{run_benchmark_with, write_csv, SimConfig};
use winner_design::Error;

#[test]
fn load_records_from_disk() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    write!(f, "arm,outcome\nc,1.5\nt1,2\nt2,-0.25\nc,0.5\n").unwrap();
    let rs = load_records(f.path(), &parse_arm_map("c=0,t1=1,t2=2").unwrap()).unwrap();
    assert_eq!(rs.counts().n, [2, 1, 1]);
    assert_eq!(rs.outcomes(Arm::Control), vec![1.5, 0.5]);

    let mut bad = tempfile::NamedTempFile::new().unwrap();
    write!(bad, "arm,outcome\nc,1\nzz,2\n").unwrap();
    match load_records(bad.path(), &parse_arm_map("c=0,t1=1,t2=2").unwrap()) {
        Err(Error::UnmappedLabel { line, label }) => {
            assert_eq!(line, 3);
            assert_eq!(label, "zz");
        }
        other => panic!("{other:?}"),
    }
    assert!(load_records("/nonexistent/corpus.csv", &parse_arm_map("c=0").unwrap()).is_err());
}

#[test]
fn two_stage_counts_add_up() {
    let h = Hyperparams::from_gap(0.2, 1.25, 1.0).unwrap();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut source = NormalSource::new(&h).unwrap();
        let pilot = Allocation::equal(90);
        let r = run_two_stage(&mut source, 400, &pilot, &mut rng, &DesignOptions::default()).unwrap();
        assert_eq!(r.plan.combined().total(), 400);
        assert_eq!(r.post_stats.count, r.plan.post.n);
        assert_eq!(r.pilot_stats.count, pilot.n);
        assert_eq!(solve_adaptive_allocation(&r.pilot_stats, &pilot, 310, None).unwrap(), r.plan.post);
        let o = r.outcome;
        assert!((o.tau_raw - o.bias_term - o.tau_debiased).abs() < 1e-15);
        for w in 0..3 {
            assert!((o.omega[w] - pilot.n[w] as f64 / r.plan.combined().n[w] as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn benchmark_csv_reproducible_across_workers() {
    let cfg = SimConfig::from_json_str(
        r#"{"schema_version": 1, "delta": 0.1, "sigma_ratio": 1.25, "sigma0_sq": 1,
            "T_grid": [60, 120], "T0_rule": {"power": 0.6}, "replications": 500, "master_seed": 8,
            "methods": ["proposal", "ss_se", "oracle"], "ss_se_mode": "neyman", "search": "standard"}"#,
    )
    .unwrap();
    let mut bytes = Vec::new();
    for workers in [1, 4] {
        let mut out = Vec::new();
        write_csv(&mut out, &run_benchmark_with(&cfg, 500, workers).unwrap()).unwrap();
        bytes.push(out);
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(String::from_utf8(bytes[0].clone()).unwrap().lines().count(), 1 + 2 * 3);
}
