use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use winner_design::design::{run_two_stage, DesignOptions, NormalSource};
use winner_design::model::{Allocation, Hyperparams};
use winner_design::objective::EstimatorKind;
use winner_design::optimizer::{solve_oracle_allocation_with, SearchStrategy};
use winner_design::replay::{load_records, parse_arm_map, pseudo_treatment_split, run_replay, write_replay_csv, ReplayConfig};
use winner_design::simulator::{run_benchmark_with, write_csv, Method, SearchPreset, SimConfig, SsSeMode, FULL_SCALE_REPLICATIONS};
use winner_design::validation::{run_suite, Suite, ValidationScale};
use winner_design::Error;

#[derive(Parser)]
#[command(name = "winner-design", version, about = "Two-stage allocation for picking and estimating the better of two treatments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Outcome means are (0, 0, delta); the sigmas are standard deviations.
#[derive(clap::Args)]
struct Model {
    #[arg(long, allow_hyphen_values = true)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma0: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma1: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
}

impl Model {
    fn hyperparams(&self) -> Result<Hyperparams, Error> {
        Hyperparams::new(
            [0.0, 0.0, self.delta],
            [self.sigma0 * self.sigma0, self.sigma1 * self.sigma1, self.sigma2 * self.sigma2],
        )
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Lemma,
    Bias,
    Mse,
    Convergence,
    Selection,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Lemma => Suite::Lemma,
            SuiteArg::Bias => Suite::Bias,
            SuiteArg::Mse => Suite::Mse,
            SuiteArg::Convergence => Suite::Convergence,
            SuiteArg::Selection => Suite::Selection,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Allocation minimizing the MSE under known hyperparameters.
    OracleAlloc {
        #[command(flatten)]
        model: Model,
        #[arg(long = "T")]
        total: u64,
        #[arg(long)]
        json: bool,
    },
    /// Monte Carlo benchmark of the design methods.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the full replication count instead of the configured one.
        #[arg(long)]
        full_scale: bool,
        /// Overrides `master_seed` of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "WINNER_DESIGN_WORKERS")]
        workers: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// One synthetic two-stage experiment.
    TwoStage {
        #[command(flatten)]
        model: Model,
        #[arg(long = "T")]
        total: u64,
        /// Pilot size, split as evenly as possible with the remainder on control.
        #[arg(long = "T0")]
        pilot: u64,
        /// Drawn from the OS when absent.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_debias: bool,
        #[arg(long)]
        json: bool,
    },
    /// Repeated two-stage experiments on draws without replacement from a CSV corpus.
    Replay {
        #[arg(long)]
        data: PathBuf,
        /// Label-to-arm map such as `control=0,a=1,b=2`.
        #[arg(long)]
        map: String,
        #[arg(long = "T")]
        total: u64,
        #[arg(long = "T0")]
        pilot: u64,
        #[arg(long)]
        reps: u64,
        #[arg(long)]
        seed: u64,
        /// `drop=<label>,split=<label>`: remove one arm and halve another into
        /// control and a zero-effect pseudo-treatment.
        #[arg(long)]
        pseudo: Option<String>,
        /// Comma-separated method names; all methods by default.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "WINNER_DESIGN_WORKERS")]
        workers: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Closed forms against seeded Monte Carlo.
    Validate {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = ValidationScale::default().draws)]
        draws: u64,
        #[arg(long, default_value_t = ValidationScale::default().convergence_replications)]
        replications: u64,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn default_workers(requested: Option<usize>) -> usize {
    requested
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn print_json(value: &serde_json::Value) -> Result<(), Error> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::OracleAlloc { model, total, json } => {
            let h = model.hyperparams()?;
            let (a, mse) = solve_oracle_allocation_with(&h, total, EstimatorKind::Debiased, &SearchStrategy::default())?;
            if json {
                print_json(&json!({
                    "T": total,
                    "hyperparams": h,
                    "allocation": a.n,
                    "oracle_mse": mse,
                }))?;
            } else {
                println!("n0 = {}, n1 = {}, n2 = {}", a.n[0], a.n[1], a.n[2]);
                println!("oracle_mse = {mse}");
            }
        }
        Command::Simulate {
            config,
            out,
            full_scale,
            seed,
            workers,
            json,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg = SimConfig::from_json_str(&text)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let reps = if full_scale { FULL_SCALE_REPLICATIONS } else { cfg.replications };
            let records = run_benchmark_with(&cfg, reps, default_workers(workers))?;
            write_csv(BufWriter::new(File::create(&out)?), &records)?;
            if json {
                print_json(&json!({ "out": out, "records": records }))?;
            } else {
                println!("wrote {} rows to {}", records.len(), out.display());
            }
        }
        Command::TwoStage {
            model,
            total,
            pilot,
            seed,
            no_debias,
            json,
        } => {
            let h = model.hyperparams()?;
            let seed = seed.unwrap_or_else(|| rand::rng().next_u64());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut source = NormalSource::new(&h)?;
            let opts = DesignOptions {
                debias: !no_debias,
                ..DesignOptions::default()
            };
            let report = run_two_stage(&mut source, total, &Allocation::equal(pilot), &mut rng, &opts)?;
            if json {
                print_json(&json!({ "seed": seed, "report": report }))?;
            } else {
                let o = &report.outcome;
                let p = &report.plan;
                println!("seed = {seed}");
                println!("pilot = {:?}, post = {:?}", p.pilot.n, p.post.n);
                println!("winner = {}", o.winner.index());
                println!("tau_hat = {}", o.tau_raw);
                println!("bias_hat = {}", o.bias_term);
                println!("tau_debiased = {}", o.tau_debiased);
            }
        }
        Command::Replay {
            data,
            map,
            total,
            pilot,
            reps,
            seed,
            pseudo,
            methods,
            out,
            workers,
            json,
        } => {
            let arm_map = parse_arm_map(&map)?;
            let mut rs = load_records(&data, &arm_map)?;
            if let Some(entries) = pseudo {
                let (drop, split) = parse_pseudo(&entries)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u64::MAX);
                rs = pseudo_treatment_split(&rs, &drop, &split, &mut rng)?;
            }
            let methods = match methods {
                None => Method::ALL.to_vec(),
                Some(names) => names.iter().map(|s| s.parse()).collect::<Result<Vec<Method>, _>>()?,
            };
            let cfg = ReplayConfig {
                corpus: data.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
                total,
                t0: pilot,
                replications: reps,
                seed,
                methods,
                ss_se_mode: SsSeMode::default(),
                search: SearchPreset::default(),
            };
            let records = run_replay(&rs, &cfg, default_workers(workers))?;
            match &out {
                Some(path) => write_replay_csv(BufWriter::new(File::create(path)?), &records)?,
                None if !json => write_replay_csv(io::stdout().lock(), &records)?,
                None => {}
            }
            if json {
                print_json(&json!({ "out": out, "records": records }))?;
            }
        }
        Command::Validate {
            suite,
            seed,
            draws,
            replications,
            json,
        } => {
            let suite = Suite::from(suite);
            let scale = ValidationScale {
                draws,
                convergence_replications: replications,
            };
            let checks = run_suite(suite, seed, &scale)?;
            let passed = checks.iter().all(|c| c.passed);
            if json {
                print_json(&json!({ "suite": suite, "seed": seed, "passed": passed, "checks": checks }))?;
            } else {
                for c in &checks {
                    let verdict = if c.passed { "PASS" } else { "FAIL" };
                    if c.expected.is_nan() {
                        println!("{verdict} {}: {:.6e}", c.name, c.observed);
                    } else {
                        println!(
                            "{verdict} {}: observed {:.6e}, expected {:.6e}, deviation {:.3} (tolerance {})",
                            c.name, c.observed, c.expected, c.deviation, c.tolerance
                        );
                    }
                }
            }
            if !passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_pseudo(entries: &str) -> Result<(String, String), Error> {
    let mut drop = None;
    let mut split = None;
    for part in entries.split(',') {
        match part.trim().split_once('=') {
            Some(("drop", v)) if !v.is_empty() => drop = Some(v.to_string()),
            Some(("split", v)) if !v.is_empty() => split = Some(v.to_string()),
            _ => return Err(Error::Domain(format!("bad --pseudo entry `{part}`; expected drop=<label>,split=<label>"))),
        }
    }
    match (drop, split) {
        (Some(d), Some(s)) => Ok((d, s)),
        _ => Err(Error::Domain("--pseudo needs both drop=<label> and split=<label>".into())),
    }
}
