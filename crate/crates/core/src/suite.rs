//! Seeded run matrices used by `setchain check` and the integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::AdversaryKind;
use crate::cluster::{ClientKind, ClusterConfig, Violation, World, WorkloadConfig};
use crate::server::{AggConfig, Algorithm};
use crate::simnet::{NetConfig, SimTime};
use crate::types::ProcessId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub n: usize,
    pub f: usize,
    pub algorithm: Algorithm,
    pub adversary: AdversaryKind,
    pub seed: u64,
}

impl Case {
    pub fn new(n: usize, algorithm: Algorithm, adversary: AdversaryKind, seed: u64) -> Case {
        Case { n, f: fault_bound(n), algorithm, adversary, seed }
    }

    pub fn key(&self) -> String {
        let algo = match self.algorithm {
            Algorithm::Fast => "fast",
            Algorithm::FastAgg => "fast-agg",
        };
        format!("n{}-{}-{}-s{}", self.n, algo, self.adversary.name(), self.seed)
    }
}

/// Largest f with n >= 3f+1.
pub fn fault_bound(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

pub const PROPERTY_DURATION: SimTime = SimTime(1500);

/// Small workload with quorum and optimistic clients; havoc runs get a random GST.
pub fn property_config(case: &Case) -> ClusterConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x9e37_79b9_7f4a_7c15);
    let gst = if case.adversary == AdversaryKind::Havoc { SimTime(rng.gen_range(0..=400)) } else { SimTime::ZERO };
    ClusterConfig {
        n: case.n,
        f: case.f,
        algorithm: case.algorithm,
        adversary: case.adversary,
        net: NetConfig { gst, ..Default::default() },
        agg: AggConfig { max_batch: 4, max_wait: SimTime(100) },
        sign_epochs: true,
        workload: WorkloadConfig {
            add_rate: 20_000,
            dpo_clients: 2,
            optimistic_clients: 1,
            client_ops: 4,
            ..Default::default()
        },
        seed: case.seed,
        ..Default::default()
    }
}

/// Optimistic clients against adversaries that lie to clients.
pub fn client_config(case: &Case) -> ClusterConfig {
    ClusterConfig {
        n: case.n,
        f: case.f,
        algorithm: case.algorithm,
        adversary: case.adversary,
        sign_epochs: true,
        workload: WorkloadConfig { dpo_clients: 1, optimistic_clients: case.n, client_ops: 3, ..Default::default() },
        seed: case.seed,
        ..Default::default()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: Case,
    pub events: u64,
    pub checks: u64,
    pub epochs: u64,
    pub quiescent: bool,
    pub confirmations: u64,
    pub false_confirmations: u64,
    pub unconfirmed: u64,
    /// Unconfirmed operations of clients whose first target is correct.
    pub correct_target_unconfirmed: u64,
    pub dpo_gets: u64,
    pub violations: Vec<Violation>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.quiescent
    }
}

pub fn run_case(case: &Case, cfg: ClusterConfig, duration: SimTime) -> CaseResult {
    let mut w = World::new(cfg).expect("suite configs are valid");
    w.run(duration);
    let mut violations = w.violations().to_vec();
    violations.extend(contract_violations(&w));
    let m = w.metrics();
    let mut correct_target_unconfirmed = 0;
    for (_, c) in w.clients() {
        if let ClientKind::Optimistic(o) = c {
            if w.correct_ids().contains(&o.target(0)) {
                correct_target_unconfirmed +=
                    o.outcomes().iter().filter(|(_, r)| !matches!(r, crate::client::Outcome::Confirmed(_))).count()
                        as u64;
            }
        }
    }
    CaseResult {
        case: *case,
        events: m.events,
        checks: w.checker().checks(),
        epochs: w.checker().reference().len() as u64,
        quiescent: w.quiescence().is_some_and(|q| q.reached),
        confirmations: m.confirmations,
        false_confirmations: m.false_confirmations,
        unconfirmed: m.unconfirmed,
        correct_target_unconfirmed,
        dpo_gets: m.dpo_gets,
        violations,
    }
}

pub fn run_property_case(case: &Case) -> CaseResult {
    run_case(case, property_config(case), PROPERTY_DURATION)
}

pub fn run_client_case(case: &Case) -> CaseResult {
    run_case(case, client_config(case), SimTime(2000))
}

/// {4, 7, 10} servers × both algorithms × {none, silent, havoc} × seeds.
pub fn property_matrix(seeds: impl IntoIterator<Item = u64>) -> Vec<Case> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let mut v = Vec::new();
    for n in [4, 7, 10] {
        for algorithm in [Algorithm::Fast, Algorithm::FastAgg] {
            for adversary in [AdversaryKind::None, AdversaryKind::Silent, AdversaryKind::Havoc] {
                for &seed in &seeds {
                    v.push(Case::new(n, algorithm, adversary, seed));
                }
            }
        }
    }
    v
}

pub fn client_matrix(seeds: impl IntoIterator<Item = u64>) -> Vec<Case> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let mut v = Vec::new();
    for adversary in [AdversaryKind::ForgedDigest, AdversaryKind::LyingHistory] {
        for &seed in &seeds {
            v.push(Case::new(4, Algorithm::Fast, adversary, seed));
        }
    }
    v
}

fn contract(property: &str, t: SimTime, server: Option<ProcessId>, detail: String) -> Violation {
    Violation { property: property.into(), t, server, detail }
}

/// BRB and set-consensus contracts, checked on the final state of a drained run.
pub fn contract_violations(w: &World) -> Vec<Violation> {
    let now = w.now();
    let mut v = Vec::new();
    let correct: Vec<_> = w.correct_servers().collect();
    for s in &correct {
        let brb = s.brb();
        let delivered = brb.instances().filter(|(_, i)| i.delivered).count() as u64;
        if delivered != s.stats().brb_deliveries {
            v.push(contract("brb-no-duplication", now, Some(s.id()), format!("{delivered} instances, {} deliveries", s.stats().brb_deliveries)));
        }
        for (&(origin, digest), inst) in brb.instances() {
            if !inst.delivered {
                if origin == s.id() && inst.echoed {
                    v.push(contract("brb-termination-local", now, Some(s.id()), format!("own broadcast {digest} undelivered")));
                }
                continue;
            }
            if let Some(o) = w.server(origin) {
                if !o.brb().instance(origin, &digest).is_some_and(|i| i.echoed && i.payload.is_some()) {
                    v.push(contract("brb-validity", now, Some(s.id()), format!("{digest} not broadcast by {origin}")));
                }
            }
            for t in &correct {
                if !t.brb().instance(origin, &digest).is_some_and(|i| i.delivered) {
                    v.push(contract("brb-termination-global", now, Some(t.id()), format!("{digest} from {origin} missing")));
                }
            }
        }
    }

    let sbc = w.sbc();
    let gst = w.config().net.gst;
    let bound = w.config().net.post_gst_bound;
    let window = w.config().sbc.window;
    for inst in sbc.instances() {
        let h = inst.h;
        if sbc.informs(h) != sbc.propose_calls(h) {
            v.push(contract("sbc-inform-validity", now, None, format!("instance {h}: informs != proposals")));
        }
        let Some(decided) = &inst.decided else {
            if inst.first_correct_arrival.is_some() && h <= sbc.last_decided().next() && w.quiescence().is_some_and(|q| q.reached) {
                v.push(contract("sbc-termination", now, None, format!("instance {h} undecided")));
            }
            continue;
        };
        for (p, set) in decided.iter() {
            if inst.proposals.get(p) != Some(set) {
                v.push(contract("sbc-validity", now, None, format!("instance {h}: {p} decided value not proposed")));
            }
        }
        let decided_at = inst.decided_at.unwrap_or_default();
        if let Some(first) = inst.first_correct_arrival {
            // In-order decisions may hold an instance behind its predecessor.
            let prev = if h.0 > 1 { sbc.instance(crate::types::EpochNumber(h.0 - 1)).and_then(|i| i.decided_at) } else { None };
            let due = (first + window).max(gst).max(prev.unwrap_or_default()) + bound;
            if decided_at > due {
                v.push(contract("sbc-termination", now, None, format!("instance {h} decided at {decided_at}, due {due}")));
            }
        }
        for (p, at) in &inst.arrivals {
            if w.correct_ids().contains(p) && *at >= gst && *at < decided_at && !decided.contains_key(p) {
                v.push(contract("sbc-censorship", now, None, format!("instance {h}: proposal of {p} left out")));
            }
        }
    }
    v
}
