//! The `bond` command line: `train`, `compare`, `sweep` and `oracle`.
//!
//! Any `--a.b=value` argument that is not one of the named flags is taken as
//! an override of the TOML config. Exit codes are listed in [`exit`].

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::harness::{metrics_jsonl, MetricsRecord, RunResult, RunSummary};
use crate::oracle::{run_scope, CheckResult, Fault, Scope};

pub use config::RunConfig;

pub mod exit {
    pub const OK: i32 = 0;
    pub const ORACLE_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const RUNTIME: i32 = 4;
}

const DEFAULT_OUT: &str = "bond-out";
const NAMED_FLAGS: [&str; 7] = ["config", "seed", "jobs", "out", "help", "version", "inject-fault"];

#[derive(Debug, Parser)]
#[command(name = "bond", version, about = "Train hybrid models across black-box reservoirs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write metrics.jsonl and summary.json.
    Train(RunArgs),
    /// Train every estimator in `estimator.compare` on the same data.
    Compare(RunArgs),
    /// Train the configured estimator over several seeds.
    Sweep(RunArgs),
    /// Check gradients, estimators and bounds against exact references.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent runs for `compare` and `sweep`.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory; falls back to the config, then $BOND_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleScope {
    Autodiff,
    Estimator,
    Bounds,
    All,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(value_enum, default_value_t = OracleScope::All)]
    scope: OracleScope,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Writes oracle.json here when given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Negates backpropagated read-in gradients to prove the oracle bites.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Splits `--key=value` config overrides from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for (i, a) in args.into_iter().enumerate() {
        let candidate = (i > 0)
            .then(|| a.strip_prefix("--"))
            .flatten()
            .and_then(|s| s.split_once('='))
            .filter(|(k, _)| !NAMED_FLAGS.contains(k));
        match candidate {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let (args, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    let outcome = match cli.command {
        Command::Oracle(a) => {
            if !overrides.is_empty() {
                eprintln!("error: oracle takes no config overrides");
                return exit::CONFIG;
            }
            oracle(&a)
        }
        Command::Train(a) => with_config(&a, &overrides, run_train),
        Command::Compare(a) => with_config(&a, &overrides, run_compare),
        Command::Sweep(a) => with_config(&a, &overrides, run_sweep),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Parameter(_) => exit::CONFIG,
        Error::Divergence { .. } => exit::DIVERGED,
        _ => exit::RUNTIME,
    }
}

fn with_config(
    args: &RunArgs,
    overrides: &[(String, String)],
    f: fn(&RunConfig, &Path, usize) -> Result<i32>,
) -> Result<i32> {
    let mut cfg = RunConfig::load(args.config.as_deref(), overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.seeds = vec![seed];
    }
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .or_else(|| std::env::var_os("BOND_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&out)?;
    f(&cfg, &out, args.jobs)
}

/// Runs `jobs` in a pool of `threads`, keeping input order.
fn run_all(cfg: &RunConfig, jobs: &[(EstimatorKind, u64)], threads: usize) -> Result<Vec<RunResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(|&(k, s)| cfg.train(k, s)).collect())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn summary_line(s: &RunSummary) -> String {
    let mut line = format!(
        "{} {} seed={} final_test_loss={:.6} smoothed_test_loss={:.6}",
        s.arch.name(),
        s.estimator,
        s.seed,
        s.final_test_loss,
        s.smoothed_test_loss
    );
    if let Some(acc) = s.final_test_accuracy {
        let _ = write!(line, " accuracy={:.2}%", 100.0 * acc);
    }
    if let Some(sign) = s.mean_sign_agreement_pct {
        let _ = write!(line, " sign_agreement={sign:.2}%");
    }
    let _ = write!(line, " loop_ms={:.3}±{:.3}", s.loop_time.mean_ms, s.loop_time.std_ms);
    line
}

fn run_train(cfg: &RunConfig, out: &Path, _jobs: usize) -> Result<i32> {
    let res = cfg.train(cfg.estimator.kind, cfg.seed)?;
    std::fs::write(out.join("metrics.jsonl"), metrics_jsonl(&res.records))?;
    write_json(
        &out.join("summary.json"),
        &json!({ "config": cfg, "summary": res.summary }),
    )?;
    println!("{}", summary_line(&res.summary));
    Ok(exit::OK)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub estimator: EstimatorKind,
    pub seeds: Vec<u64>,
    pub final_test_loss: (f64, f64),
    pub smoothed_test_loss: (f64, f64),
    pub final_test_accuracy: Option<(f64, f64)>,
    pub sign_agreement_pct: Option<(f64, f64)>,
    pub loop_time_ms: (f64, f64),
}

impl Aggregate {
    pub fn from_runs(estimator: EstimatorKind, runs: &[&RunSummary]) -> Self {
        let pick = |f: fn(&RunSummary) -> f64| mean_std(&runs.iter().map(|s| f(s)).collect::<Vec<_>>());
        let optional = |f: fn(&RunSummary) -> Option<f64>| {
            let v: Option<Vec<f64>> = runs.iter().map(|s| f(s)).collect();
            v.filter(|v| !v.is_empty()).map(|v| mean_std(&v))
        };
        Self {
            estimator,
            seeds: runs.iter().map(|s| s.seed).collect(),
            final_test_loss: pick(|s| s.final_test_loss),
            smoothed_test_loss: pick(|s| s.smoothed_test_loss),
            final_test_accuracy: optional(|s| s.final_test_accuracy),
            sign_agreement_pct: optional(|s| s.mean_sign_agreement_pct),
            loop_time_ms: pick(|s| s.loop_time.mean_ms),
        }
    }
}

fn run_sweep(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<i32> {
    let kind = cfg.estimator.kind;
    let plan: Vec<_> = cfg.sweep_seeds().into_iter().map(|s| (kind, s)).collect();
    let results = run_all(cfg, &plan, jobs)?;
    for r in &results {
        std::fs::write(
            out.join(format!("metrics_seed{}.jsonl", r.summary.seed)),
            metrics_jsonl(&r.records),
        )?;
        println!("{}", summary_line(&r.summary));
    }
    let summaries: Vec<&RunSummary> = results.iter().map(|r| &r.summary).collect();
    let agg = Aggregate::from_runs(kind, &summaries);
    println!(
        "{kind} over {} seeds: final_test_loss={:.6}±{:.6}",
        agg.seeds.len(),
        agg.final_test_loss.0,
        agg.final_test_loss.1
    );
    write_json(
        &out.join("summary.json"),
        &json!({ "config": cfg, "runs": summaries, "aggregate": agg }),
    )?;
    Ok(exit::OK)
}

/// Per-epoch mean training loss and end-of-epoch test loss.
pub fn epoch_curves(records: &[MetricsRecord]) -> Vec<(f64, f64)> {
    let mut curves: Vec<(f64, usize, f64)> = Vec::new();
    for r in records {
        if curves.len() <= r.epoch {
            curves.resize(r.epoch + 1, (0.0, 0, f64::NAN));
        }
        let c = &mut curves[r.epoch];
        c.0 += r.train_loss;
        c.1 += 1;
        if let Some(t) = r.test_loss {
            c.2 = t;
        }
    }
    curves
        .into_iter()
        .map(|(sum, n, t)| (sum / n.max(1) as f64, t))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn run_compare(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<i32> {
    let seeds = cfg.compare_seeds();
    let plan: Vec<_> = cfg
        .estimator
        .compare
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results = run_all(cfg, &plan, jobs)?;
    for r in &results {
        let name = format!("metrics_{}_seed{}.jsonl", r.summary.estimator, r.summary.seed);
        std::fs::write(out.join(name), metrics_jsonl(&r.records))?;
    }

    let mut aggregates = Vec::new();
    let mut curves = Vec::new();
    for &kind in &cfg.estimator.compare {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.summary.estimator == kind).collect();
        let per_seed: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| epoch_curves(&r.records)).collect();
        let epochs = per_seed.iter().map(Vec::len).min().unwrap_or(0);
        let mean: Vec<(f64, f64)> = (0..epochs)
            .map(|e| {
                let tr = mean_std(&per_seed.iter().map(|c| c[e].0).collect::<Vec<_>>()).0;
                let te = mean_std(&per_seed.iter().map(|c| c[e].1).collect::<Vec<_>>()).0;
                (tr, te)
            })
            .collect();
        curves.push((kind, mean));
        let summaries: Vec<&RunSummary> = runs.iter().map(|r| &r.summary).collect();
        aggregates.push(Aggregate::from_runs(kind, &summaries));
    }

    let mut csv = String::from("epoch");
    for (k, _) in &curves {
        let _ = write!(csv, ",{k}_train_loss,{k}_test_loss");
    }
    csv.push('\n');
    let epochs = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for e in 0..epochs {
        let _ = write!(csv, "{}", e + 1);
        for (_, c) in &curves {
            match c.get(e) {
                Some((tr, te)) => {
                    let _ = write!(csv, ",{tr},{te}");
                }
                None => csv.push_str(",,"),
            }
        }
        csv.push('\n');
    }
    std::fs::write(out.join("curves.csv"), csv)?;

    let mut table = String::from(
        "estimator,final_test_loss_mean,final_test_loss_std,smoothed_test_loss_mean,smoothed_test_loss_std,\
         sign_agreement_pct_mean,sign_agreement_pct_std,loop_time_ms_mean,loop_time_ms_std\n",
    );
    for a in &aggregates {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            a.estimator,
            a.final_test_loss.0,
            a.final_test_loss.1,
            a.smoothed_test_loss.0,
            a.smoothed_test_loss.1,
            fmt_opt(a.sign_agreement_pct.map(|s| s.0)),
            fmt_opt(a.sign_agreement_pct.map(|s| s.1)),
            a.loop_time_ms.0,
            a.loop_time_ms.1
        );
        println!(
            "{:<6} final_test_loss={:.6}±{:.6} sign_agreement={} loop_ms={:.3}",
            a.estimator.to_string(),
            a.final_test_loss.0,
            a.final_test_loss.1,
            a.sign_agreement_pct
                .map(|s| format!("{:.2}%", s.0))
                .unwrap_or_else(|| "-".into()),
            a.loop_time_ms.0
        );
    }
    std::fs::write(out.join("summary.csv"), table)?;
    write_json(
        &out.join("summary.json"),
        &json!({ "config": cfg, "estimators": aggregates }),
    )?;
    Ok(exit::OK)
}

fn oracle(args: &OracleArgs) -> Result<i32> {
    let scopes: Vec<Scope> = match args.scope {
        OracleScope::Autodiff => vec![Scope::Autodiff],
        OracleScope::Estimator => vec![Scope::Estimator],
        OracleScope::Bounds => vec![Scope::Bounds],
        OracleScope::All => Scope::ALL.to_vec(),
    };
    let fault = args.inject_fault.then_some(Fault::FlipBackwardSign);
    let mut checks: Vec<CheckResult> = Vec::new();
    for s in scopes {
        for c in run_scope(s, args.seed, fault)? {
            println!("{c}");
            checks.push(c);
        }
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("oracle.json"), &checks)?;
    }
    Ok(if failed == 0 { exit::OK } else { exit::ORACLE_FAILED })
}
