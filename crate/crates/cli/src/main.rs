use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use setchain::bench::{self, Bundle, RunCounterexample, RunReport, Scenario, SuiteCounterexample};
use setchain::byz_model;
use setchain::suite::{self, CaseResult};

#[derive(Parser)]
#[command(name = "setchain", version, about = "Setchain on a simulated network: benchmarks, checks, replays")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario over a range of seeds.
    Bench {
        /// Scenario JSON file, or a built-in name (default, h1, h3-fast, h3-fast-agg, h4-none, h4-silent, h5).
        #[arg(long)]
        scenario: Option<String>,
        /// `a..b` (inclusive), `a..=b`, or a count `N` meaning `0..N-1`. Defaults to SETCHAIN_SEED or the scenario's seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        /// Evaluate the H1, H3, H4 and H5 comparisons instead of a single scenario.
        #[arg(long)]
        hypotheses: bool,
    },
    /// Run one of the seeded check suites.
    Check {
        #[arg(long, value_enum)]
        suite: SuiteName,
        /// Number of seeds; SETCHAIN_SEED runs that one seed instead.
        #[arg(long)]
        seeds: Option<u64>,
        /// Where counterexample bundles and results go.
        #[arg(long, default_value = "check-out")]
        out: PathBuf,
    },
    /// Re-run a counterexample bundle written by `bench` or `check`.
    Replay {
        #[arg(long)]
        counterexample: PathBuf,
        /// Also write the simulated message log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteName {
    Properties,
    Byzmodel,
    Clients,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SETCHAIN_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("SETCHAIN_SEED={s:?} is not a seed"))?)),
        Err(_) => Ok(None),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.parse().with_context(|| format!("bad seed range {s:?}"))?;
        let b: u64 = b.trim_start_matches('=').parse().with_context(|| format!("bad seed range {s:?}"))?;
        if b < a {
            bail!("empty seed range {s:?}");
        }
        return Ok((a..=b).collect());
    }
    let n: u64 = s.parse().with_context(|| format!("bad seed count {s:?}"))?;
    Ok((0..n).collect())
}

fn load_scenario(spec: &str) -> Result<Scenario> {
    if let Some(s) = bench::builtin(spec) {
        return Ok(s);
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading scenario {spec}"))?;
    let s: Scenario = serde_json::from_str(&text).with_context(|| format!("parsing scenario {spec}"))?;
    Ok(s)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    scenario: &'a str,
    seed: u64,
    n: usize,
    f: usize,
    algorithm: &'a str,
    adversary: &'a str,
    duration: u64,
    adds_attempted: u64,
    adds_stamped: u64,
    epochs_completed: u64,
    adds_per_sec: f64,
    epochs_per_sec: f64,
    messages_per_add: Option<f64>,
    latency_avg: f64,
    latency_median: u64,
    latency_max: u64,
    events: u64,
    violations: usize,
}

fn summary_row(r: &RunReport) -> SummaryRow<'_> {
    SummaryRow {
        scenario: &r.scenario,
        seed: r.seed,
        n: r.n,
        f: r.f,
        algorithm: match r.algorithm {
            setchain::server::Algorithm::Fast => "fast",
            setchain::server::Algorithm::FastAgg => "fast-agg",
        },
        adversary: r.adversary.name(),
        duration: r.duration.0,
        adds_attempted: r.adds_attempted,
        adds_stamped: r.adds_stamped,
        epochs_completed: r.epochs_completed,
        adds_per_sec: r.adds_per_sec,
        epochs_per_sec: r.epochs_per_sec,
        messages_per_add: r.messages_per_add,
        latency_avg: r.stamp_latency.avg,
        latency_median: r.stamp_latency.median,
        latency_max: r.stamp_latency.max,
        events: r.events,
        violations: r.property_violations.len(),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn bench(scenario: Option<String>, seeds: Option<String>, out: &Path, hypotheses: bool) -> Result<bool> {
    fs::create_dir_all(out)?;
    if hypotheses {
        let seed = env_seed()?.unwrap_or(0);
        let results = bench::evaluate_all(seed);
        for h in &results {
            println!("{} {}: {:.3} ({})", if h.passed { "PASS" } else { "FAIL" }, h.name, h.value, h.detail);
        }
        write_jsonl(&out.join("hypotheses.jsonl"), &results)?;
        write_csv(&out.join("hypotheses.csv"), results.iter().map(|h| (&h.name, h.value, h.threshold, h.passed)))?;
        return Ok(results.iter().all(|h| h.passed));
    }
    let base = load_scenario(scenario.as_deref().unwrap_or("default"))?;
    base.validate()?;
    let seeds = match (seeds, env_seed()?) {
        (Some(s), _) => parse_seeds(&s)?,
        (None, Some(s)) => vec![s],
        (None, None) => vec![base.seed],
    };
    let runs: Vec<Scenario> = seeds.iter().map(|&s| base.with_seed(s)).collect();
    let reports: Vec<RunReport> = runs.par_iter().map(bench::run_scenario).collect::<Result<_, _>>()?;
    write_jsonl(&out.join("reports.jsonl"), &reports)?;
    write_csv(&out.join("summary.csv"), reports.iter().map(summary_row))?;
    let mut ok = true;
    for (s, r) in runs.iter().zip(&reports) {
        if !r.passed() {
            ok = false;
            let path = out.join(format!("counterexample-{}.json", s.key()));
            let b = Bundle::Run(RunCounterexample { scenario: s.clone(), violations: r.property_violations.clone() });
            fs::write(&path, b.to_json())?;
            eprintln!("{} failed: {:?}; bundle at {}", s.key(), r.property_violations.first(), path.display());
        }
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&RunReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    println!(
        "{}: {} runs, mean {:.0} adds/s, {:.0} epochs/s, {} failed; results in {}",
        base.name,
        reports.len(),
        mean(|r| r.adds_per_sec),
        mean(|r| r.epochs_per_sec),
        reports.iter().filter(|r| !r.passed()).count(),
        out.display()
    );
    Ok(ok)
}

fn check(suite: SuiteName, seeds: Option<u64>, out: &Path) -> Result<bool> {
    fs::create_dir_all(out)?;
    let seeds: Vec<u64> = match (seeds, env_seed()?) {
        (Some(n), _) => (0..n).collect(),
        (None, Some(s)) => vec![s],
        (None, None) => (0..100).collect(),
    };
    match suite {
        SuiteName::Properties | SuiteName::Clients => {
            let (name, cases, run): (&str, _, fn(&suite::Case) -> CaseResult) = match suite {
                SuiteName::Properties => ("properties", suite::property_matrix(seeds), suite::run_property_case),
                _ => ("clients", suite::client_matrix(seeds), suite::run_client_case),
            };
            let results: Vec<CaseResult> = cases.par_iter().map(run).collect();
            write_jsonl(&out.join(format!("{name}.jsonl")), &results)?;
            let failed: Vec<&CaseResult> = results
                .iter()
                .filter(|r| !r.passed() || r.false_confirmations > 0 || r.correct_target_unconfirmed > 0)
                .collect();
            for r in &failed {
                let path = out.join(format!("counterexample-{}.json", r.case.key()));
                let b = Bundle::SuiteCase(SuiteCounterexample {
                    suite: name.into(),
                    case: r.case,
                    violations: r.violations.clone(),
                });
                fs::write(&path, b.to_json())?;
                eprintln!("{} failed: {:?}; bundle at {}", r.case.key(), r.violations.first(), path.display());
            }
            let events: u64 = results.iter().map(|r| r.events).sum();
            let checks: u64 = results.iter().map(|r| r.checks).sum();
            println!("{name}: {} runs, {events} events, {checks} checks, {} failed", results.len(), failed.len());
            Ok(failed.is_empty())
        }
        SuiteName::Byzmodel => {
            let jobs: Vec<(u32, usize, u64)> =
                [(4, 1), (7, 2)].into_iter().flat_map(|(n, f)| seeds.iter().map(move |&s| (n, f, s))).collect();
            let results: Vec<_> = jobs.par_iter().map(|&(n, f, s)| byz_model::check_seed(n, f, 200, s)).collect();
            let mut reports = Vec::new();
            let mut failed = 0;
            for r in results {
                match r {
                    Ok(rep) => reports.push(rep),
                    Err(c) => {
                        failed += 1;
                        let path = out.join(format!(
                            "counterexample-byzmodel-n{}-f{}-s{}.json",
                            c.model.correct.len() + c.model.f(),
                            c.model.f(),
                            c.seed.unwrap_or(0)
                        ));
                        eprintln!("{:?} mapping failed at step {}: {}; bundle at {}", c.direction, c.step, c.reason, path.display());
                        fs::write(&path, Bundle::ByzModel(c).to_json())?;
                    }
                }
            }
            write_jsonl(&out.join("byzmodel.jsonl"), &reports)?;
            println!("byzmodel: {} traces mapped both ways, {failed} failed", jobs.len());
            Ok(failed == 0)
        }
    }
}

fn replay(path: &Path, log: Option<&Path>) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let bundle: Bundle = serde_json::from_str(&text).context("not a counterexample bundle")?;
    match bundle {
        Bundle::Run(c) => {
            let (r, lines) = bench::run_scenario_logged(&c.scenario)?;
            if let Some(p) = log {
                fs::write(p, lines)?;
            }
            for v in &r.property_violations {
                println!("{} at {} on {:?}: {}", v.property, v.t, v.server, v.detail);
            }
            println!("{}: {} violations (bundle recorded {})", c.scenario.key(), r.property_violations.len(), c.violations.len());
            Ok(r.passed())
        }
        Bundle::SuiteCase(c) => {
            let r = match c.suite.as_str() {
                "clients" => suite::run_client_case(&c.case),
                _ => suite::run_property_case(&c.case),
            };
            for v in &r.violations {
                println!("{} at {} on {:?}: {}", v.property, v.t, v.server, v.detail);
            }
            println!("{}: {} violations, quiescent={}", c.case.key(), r.violations.len(), r.quiescent);
            Ok(r.passed())
        }
        Bundle::ByzModel(c) => match c.replay() {
            Ok(mapped) => {
                println!("{:?} mapping of {} events now succeeds ({} mapped events)", c.direction, c.source.len(), mapped.len());
                Ok(true)
            }
            Err(again) => {
                println!("{:?} mapping fails at step {}: {}", again.direction, again.step, again.reason);
                if let Some(ev) = again.mapped.last() {
                    println!("last mapped event: {}", serde_json::to_string(ev)?);
                }
                Ok(false)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Bench { scenario, seeds, out, hypotheses } => bench(scenario, seeds, &out, hypotheses),
        Cmd::Check { suite, seeds, out } => check(suite, seeds, &out),
        Cmd::Replay { counterexample, log } => replay(&counterexample, log.as_deref()),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
