//! Scenario runs and the relative-performance hypotheses, all in simulated time.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversaryKind;
use crate::cluster::{ClusterConfig, ConfigError, CostModel, Violation, World, WorkloadConfig};
use crate::incentives::{epoch_rewards, IncentiveError, RewardParams};
use crate::sbc::SbcConfig;
use crate::server::{AggConfig, Algorithm};
use crate::simnet::{NetConfig, SimTime};
use crate::suite::fault_bound;

pub const WINDOWS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    /// Defaults to the largest bound `n` tolerates.
    pub f: Option<usize>,
    pub algorithm: Algorithm,
    pub adversary: AdversaryKind,
    pub epoch_period: SimTime,
    /// Workload adds per simulated second.
    pub add_rate: u64,
    pub duration: SimTime,
    pub seed: u64,
    pub net: NetConfig,
    pub agg: AggConfig,
    pub sbc: SbcConfig,
    pub cost: CostModel,
    pub sign_epochs: bool,
    /// Drain to quiescence after `duration` and run the liveness checks.
    pub drain: bool,
    pub incentives: Option<RewardParams>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            n: 4,
            f: None,
            algorithm: Algorithm::FastAgg,
            adversary: AdversaryKind::None,
            epoch_period: SimTime(200),
            add_rate: 1_000_000,
            duration: SimTime(100_000),
            seed: 0,
            net: NetConfig::default(),
            agg: AggConfig { max_batch: 100, max_wait: SimTime(200) },
            sbc: SbcConfig::default(),
            cost: CostModel::default(),
            sign_epochs: false,
            drain: false,
            incentives: None,
        }
    }
}

impl Scenario {
    pub fn f(&self) -> usize {
        self.f.unwrap_or_else(|| fault_bound(self.n))
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        Scenario { seed, ..self.clone() }
    }

    pub fn key(&self) -> String {
        format!("{}-s{}", self.name, self.seed)
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            n: self.n,
            f: self.f(),
            algorithm: self.algorithm,
            adversary: self.adversary,
            net: self.net,
            sbc: self.sbc,
            agg: self.agg,
            sign_epochs: self.sign_epochs,
            epoch_period: self.epoch_period,
            cost: Some(self.cost),
            workload: WorkloadConfig { add_rate: self.add_rate, ..Default::default() },
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.duration.0 == 0 {
            return Err(BenchError::Scenario("duration must be positive".into()));
        }
        if let Some(p) = &self.incentives {
            p.validate()?;
        }
        self.cluster_config().validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("degenerate-metric: {0} is zero")]
    DegenerateMetric(&'static str),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Incentives(#[from] IncentiveError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub avg: f64,
    pub max: u64,
    pub median: u64,
}

impl LatencyStats {
    fn of(mut v: Vec<u64>) -> LatencyStats {
        if v.is_empty() {
            return LatencyStats::default();
        }
        v.sort_unstable();
        let sum: u64 = v.iter().sum();
        LatencyStats { count: v.len() as u64, avg: sum as f64 / v.len() as f64, max: v[v.len() - 1], median: v[v.len() / 2] }
    }
}

/// Latency of the elements stamped during one slice of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: SimTime,
    pub end: SimTime,
    #[serde(flatten)]
    pub latency: LatencyStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub epochs_rewarded: u64,
    pub tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    pub algorithm: Algorithm,
    pub adversary: AdversaryKind,
    pub duration: SimTime,
    pub adds_attempted: u64,
    /// Workload adds first stamped within `duration`.
    pub adds_stamped: u64,
    pub epochs_completed: u64,
    pub adds_per_sec: f64,
    pub epochs_per_sec: f64,
    pub messages_per_add: Option<f64>,
    pub stamp_latency: LatencyStats,
    pub windows: Vec<Window>,
    pub message_count: BTreeMap<String, u64>,
    pub events: u64,
    pub quiescent: Option<bool>,
    pub rewards: Option<RewardSummary>,
    pub property_violations: Vec<Violation>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.property_violations.is_empty() && self.quiescent != Some(false)
    }

    pub fn total_messages(&self) -> u64 {
        self.message_count.values().sum()
    }
}

/// Runs one scenario. Safety checks run after every server handler; with
/// `drain` set the run is also brought to quiescence and checked for liveness.
pub fn run_scenario(s: &Scenario) -> Result<RunReport, BenchError> {
    run(s, false).map(|(r, _)| r)
}

/// As [`run_scenario`], also returning the message log as JSON lines.
pub fn run_scenario_logged(s: &Scenario) -> Result<(RunReport, String), BenchError> {
    run(s, true)
}

fn run(s: &Scenario, log: bool) -> Result<(RunReport, String), BenchError> {
    s.validate()?;
    let mut w = World::new(ClusterConfig { log, ..s.cluster_config() })?;
    w.start();
    w.run_until(s.duration);
    let end = s.duration;
    let m = w.metrics();
    let in_run: Vec<(SimTime, SimTime)> = m.latencies.iter().copied().filter(|(_, t)| *t <= end).collect();
    let adds_stamped = in_run.len() as u64;
    let epochs_completed = m.epoch_times.iter().filter(|t| **t <= end).count() as u64;
    let secs = end.0 as f64 / SimTime::TICKS_PER_SECOND as f64;
    let message_count: BTreeMap<String, u64> =
        w.net().sent_by_kind().iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let total: u64 = message_count.values().sum();

    let width = (end.0 / WINDOWS as u64).max(1);
    let mut buckets = vec![Vec::new(); WINDOWS];
    for (req, at) in &in_run {
        let i = ((at.0.saturating_sub(1)) / width).min(WINDOWS as u64 - 1) as usize;
        buckets[i].push(at.0 - req.0);
    }
    let windows = buckets
        .into_iter()
        .enumerate()
        .map(|(i, v)| Window {
            start: SimTime(i as u64 * width),
            end: SimTime(if i + 1 == WINDOWS { end.0 } else { (i as u64 + 1) * width }),
            latency: LatencyStats::of(v),
        })
        .collect();

    let mut report = RunReport {
        scenario: s.name.clone(),
        seed: s.seed,
        n: s.n,
        f: s.f(),
        algorithm: s.algorithm,
        adversary: s.adversary,
        duration: end,
        adds_attempted: m.adds_attempted,
        adds_stamped,
        epochs_completed,
        adds_per_sec: adds_stamped as f64 / secs,
        epochs_per_sec: epochs_completed as f64 / secs,
        messages_per_add: (adds_stamped > 0).then(|| total as f64 / adds_stamped as f64),
        stamp_latency: LatencyStats::of(in_run.iter().map(|(r, t)| t.0 - r.0).collect()),
        windows,
        message_count,
        events: m.events,
        quiescent: None,
        rewards: None,
        property_violations: Vec::new(),
    };
    if s.drain {
        let q = w.drain();
        if q.reached {
            w.final_check();
        }
        report.quiescent = Some(q.reached);
    }
    if let (Some(p), Some(server)) = (&s.incentives, w.correct_servers().next()) {
        let servers: BTreeSet<_> = w.server_ids().iter().copied().collect();
        let r = epoch_rewards(server.history(), w.keyring(), &servers, p)?;
        report.rewards = Some(RewardSummary {
            epochs_rewarded: r.iter().filter(|e| e.tokens > 0).count() as u64,
            tokens: r.iter().map(|e| e.tokens).sum(),
        });
    }
    report.events = w.metrics().events;
    report.property_violations = w.violations().to_vec();
    let log = if log { w.net().log_jsonl() } else { String::new() };
    Ok((report, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    AddsPerSec,
    EpochsPerSec,
    MessagesPerAdd,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::AddsPerSec => "adds-per-sec",
            Metric::EpochsPerSec => "epochs-per-sec",
            Metric::MessagesPerAdd => "messages-per-add",
        }
    }

    pub fn of(self, r: &RunReport) -> f64 {
        match self {
            Metric::AddsPerSec => r.adds_per_sec,
            Metric::EpochsPerSec => r.epochs_per_sec,
            Metric::MessagesPerAdd => r.messages_per_add.unwrap_or(0.0),
        }
    }
}

/// `metric(a) / metric(b)`.
pub fn compare(a: &RunReport, b: &RunReport, metric: Metric) -> Result<f64, BenchError> {
    ratio(metric.of(a), metric.of(b), metric.name())
}

/// `num(r) / den(r)` within one report.
pub fn metric_ratio(r: &RunReport, num: Metric, den: Metric) -> Result<f64, BenchError> {
    ratio(num.of(r), den.of(r), den.name())
}

fn ratio(a: f64, b: f64, what: &'static str) -> Result<f64, BenchError> {
    if b == 0.0 || !b.is_finite() {
        return Err(BenchError::DegenerateMetric(what));
    }
    Ok(a / b)
}

/// Median latency of the last window over that of the second one.
pub fn stationarity(r: &RunReport) -> Result<f64, BenchError> {
    let (Some(second), Some(last)) = (r.windows.get(1), r.windows.last()) else {
        return Err(BenchError::DegenerateMetric("windows"));
    };
    if second.latency.count == 0 || last.latency.count == 0 {
        return Err(BenchError::DegenerateMetric("window median"));
    }
    ratio(last.latency.median as f64, second.latency.median as f64, "window median")
}

/// n=4, aggregation, one add per tick, 10^5 ticks.
pub fn h1_scenario() -> Scenario {
    Scenario { name: "h1".into(), ..Default::default() }
}

/// Both algorithms at n=7, offered more load than the plain algorithm can absorb.
pub fn h3_scenarios() -> (Scenario, Scenario) {
    let base = Scenario { n: 7, add_rate: 100_000, duration: SimTime(50_000), ..Default::default() };
    (
        Scenario { name: "h3-fast".into(), algorithm: Algorithm::Fast, ..base.clone() },
        Scenario { name: "h3-fast-agg".into(), algorithm: Algorithm::FastAgg, ..base },
    )
}

/// n=10 without and with silent Byzantine servers.
pub fn h4_scenarios() -> (Scenario, Scenario) {
    let base = Scenario { n: 10, add_rate: 200_000, duration: SimTime(50_000), ..Default::default() };
    (
        Scenario { name: "h4-none".into(), ..base.clone() },
        Scenario { name: "h4-silent".into(), adversary: AdversaryKind::Silent, ..base },
    )
}

/// The default scenario over 10^6 ticks.
pub fn h5_scenario() -> Scenario {
    Scenario { name: "h5".into(), duration: SimTime(1_000_000), ..Default::default() }
}

pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "default" => Some(Scenario::default()),
        "h1" => Some(h1_scenario()),
        "h3-fast" => Some(h3_scenarios().0),
        "h3-fast-agg" => Some(h3_scenarios().1),
        "h4-none" => Some(h4_scenarios().0),
        "h4-silent" => Some(h4_scenarios().1),
        "h5" => Some(h5_scenario()),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// True when `value` must be at least `threshold`, false when strictly below.
    pub at_least: bool,
    /// Whether the bound itself passes.
    pub inclusive: bool,
    pub passed: bool,
    pub detail: String,
}

fn judged(name: &str, value: Result<f64, BenchError>, threshold: f64, at_least: bool, detail: String) -> HypothesisResult {
    let (v, passed, detail) = match value {
        Ok(v) => (v, if at_least { v >= threshold } else { v < threshold }, detail),
        Err(e) => (f64::NAN, false, format!("{detail}; {e}")),
    };
    HypothesisResult { name: name.into(), value: v, threshold, at_least, inclusive: at_least, passed, detail }
}

fn run_ok(s: &Scenario) -> Result<RunReport, BenchError> {
    let r = run_scenario(s)?;
    if let Some(v) = r.property_violations.first() {
        return Err(BenchError::Scenario(format!("{}: {} at {}: {}", s.key(), v.property, v.t, v.detail)));
    }
    Ok(r)
}

pub fn evaluate_h1(seed: u64) -> HypothesisResult {
    let r = run_ok(&h1_scenario().with_seed(seed));
    let detail = r.as_ref().ok().map(|r| format!("{:.0} adds/s, {:.0} epochs/s", r.adds_per_sec, r.epochs_per_sec));
    judged(
        "H1 adds/s over epochs/s",
        r.and_then(|r| metric_ratio(&r, Metric::AddsPerSec, Metric::EpochsPerSec)),
        100.0,
        true,
        detail.unwrap_or_default(),
    )
}

pub fn evaluate_h3(seed: u64) -> HypothesisResult {
    let (a, b) = h3_scenarios();
    let both = run_ok(&b.with_seed(seed)).and_then(|agg| Ok((agg, run_ok(&a.with_seed(seed))?)));
    let detail = both.as_ref().ok().map(|(agg, fast)| {
        format!(
            "fast-agg {:.0} adds/s, fast {:.0} adds/s; messages/add ratio {:.3}",
            agg.adds_per_sec,
            fast.adds_per_sec,
            compare(agg, fast, Metric::MessagesPerAdd).unwrap_or(f64::NAN)
        )
    });
    judged(
        "H3 fast-agg over fast adds/s at n=7",
        both.and_then(|(agg, fast)| compare(&agg, &fast, Metric::AddsPerSec)),
        2.0,
        true,
        detail.unwrap_or_default(),
    )
}

pub fn evaluate_h4(seed: u64) -> HypothesisResult {
    let (a, b) = h4_scenarios();
    let both = run_ok(&a.with_seed(seed)).and_then(|none| Ok((none, run_ok(&b.with_seed(seed))?)));
    let detail = both
        .as_ref()
        .ok()
        .map(|(none, silent)| format!("none {:.0} adds/s, silent {:.0} adds/s", none.adds_per_sec, silent.adds_per_sec));
    judged(
        "H4 silent degradation at n=10",
        both.and_then(|(none, silent)| compare(&silent, &none, Metric::AddsPerSec).map(|r| 1.0 - r)),
        0.5,
        false,
        detail.unwrap_or_default(),
    )
}

pub fn evaluate_h5(seed: u64) -> HypothesisResult {
    let r = run_ok(&h5_scenario().with_seed(seed));
    let detail = r.as_ref().ok().map(|r| {
        let meds: Vec<String> = r.windows.iter().map(|w| w.latency.median.to_string()).collect();
        format!("window medians [{}]", meds.join(", "))
    });
    judged("H5 last/second window median latency", r.and_then(|r| stationarity(&r)), 2.0, false, detail.unwrap_or_default())
        .with_inclusive()
}

impl HypothesisResult {
    fn with_inclusive(mut self) -> Self {
        // The stationarity bound is inclusive.
        self.inclusive = true;
        self.passed = self.value <= self.threshold;
        self
    }

    pub fn relation(&self) -> &'static str {
        match (self.at_least, self.inclusive) {
            (true, _) => ">=",
            (false, true) => "<=",
            (false, false) => "<",
        }
    }
}

pub fn evaluate_all(seed: u64) -> Vec<HypothesisResult> {
    vec![evaluate_h1(seed), evaluate_h3(seed), evaluate_h4(seed), evaluate_h5(seed)]
}

/// A failing run, replayable from the scenario alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunCounterexample {
    pub scenario: Scenario,
    pub violations: Vec<Violation>,
}

/// Anything `setchain replay` accepts.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Bundle {
    Run(RunCounterexample),
    ByzModel(Box<crate::byz_model::Counterexample>),
    SuiteCase(SuiteCounterexample),
}

/// A failing case of one of the seeded suites.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteCounterexample {
    pub suite: String,
    pub case: crate::suite::Case,
    pub violations: Vec<Violation>,
}

impl Bundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}
