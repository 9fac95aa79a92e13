//! A simulated deployment: servers (correct and Byzantine), clients, a workload
//! generator, the set-consensus service and a recurring epoch driver, all over one
//! [`Simnet`]. Safety properties are checked incrementally after every server handler;
//! liveness properties are checked once the run has been drained to quiescence.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AdversaryKind, ByzServer, Coalition, HavocConfig};
use crate::client::{DpoClient, DpoGetResult, OptimisticClient, Outcome, RetryPolicy};
use crate::msg::{Msg, Outbox, SetchainPayload, Timer};
use crate::sbc::{Propset, SbcConfig, SbcService};
use crate::server::{AggConfig, Algorithm, Central, Server, ServerConfig};
use crate::simnet::{Delivery, NetConfig, SimError, SimTime, Simnet};
use crate::types::{
    hash_epoch, Digest, Element, ElementSet, EpochNumber, KeyPair, Keyring, ProcessId, ProcessKind, SchemeKind,
    SignedEpochHash,
};

pub const SBC_ID: ProcessId = ProcessId(1000);
pub const DRIVER_ID: ProcessId = ProcessId(1001);
pub const WORKLOAD_ID: ProcessId = ProcessId(1002);
pub const CLIENT_BASE: u32 = 2000;

/// Processing time charged to servers per handled message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub per_message: u64,
    /// Thousandths of a tick per carried element.
    pub per_element_milli: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { per_message: 1, per_element_milli: 100 }
    }
}

impl CostModel {
    pub fn cost(&self, msg: &Msg) -> u64 {
        match msg {
            // Informs are dropped by servers after a tag check.
            Msg::Timer(_) | Msg::Inform { .. } => 0,
            m => self.per_message + m.element_count() as u64 * self.per_element_milli / 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    /// Adds per simulated second sent straight to correct servers.
    pub add_rate: u64,
    pub tick: SimTime,
    pub dpo_clients: usize,
    pub optimistic_clients: usize,
    /// Operations issued by each client.
    pub client_ops: usize,
    pub client_gap_min: u64,
    pub client_gap_max: u64,
    pub client_timeout: SimTime,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            add_rate: 0,
            tick: SimTime(10),
            dpo_clients: 0,
            optimistic_clients: 0,
            client_ops: 0,
            client_gap_min: 50,
            client_gap_max: 300,
            client_timeout: SimTime(200),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub n: usize,
    pub f: usize,
    pub algorithm: Algorithm,
    pub adversary: AdversaryKind,
    pub net: NetConfig,
    pub sbc: SbcConfig,
    pub agg: AggConfig,
    pub sign_epochs: bool,
    pub epoch_period: SimTime,
    pub cost: Option<CostModel>,
    pub scheme: SchemeKind,
    pub havoc: HavocConfig,
    pub workload: WorkloadConfig,
    /// `None` picks three epoch periods.
    pub retry: Option<RetryPolicy>,
    pub seed: u64,
    pub log: bool,
    /// Epoch rounds allowed after the workload stops before quiescence is declared missed.
    pub max_drain_rounds: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n: 4,
            f: 1,
            algorithm: Algorithm::Fast,
            adversary: AdversaryKind::None,
            net: NetConfig::default(),
            sbc: SbcConfig::default(),
            agg: AggConfig::default(),
            sign_epochs: false,
            epoch_period: SimTime(200),
            cost: None,
            scheme: SchemeKind::Mac,
            havoc: HavocConfig::default(),
            workload: WorkloadConfig::default(),
            retry: None,
            seed: 0,
            log: false,
            max_drain_rounds: 200,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("need n >= 3f+1, got n={n}, f={f}")]
    TooFewServers { n: usize, f: usize },
    #[error("epoch_period must be positive")]
    ZeroPeriod,
    #[error("workload tick must be positive")]
    ZeroTick,
    #[error(transparent)]
    Net(#[from] SimError),
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 || self.n < 3 * self.f + 1 {
            return Err(ConfigError::TooFewServers { n: self.n, f: self.f });
        }
        if self.epoch_period.0 == 0 {
            return Err(ConfigError::ZeroPeriod);
        }
        if self.workload.tick.0 == 0 {
            return Err(ConfigError::ZeroTick);
        }
        self.net.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub property: String,
    pub t: SimTime,
    pub server: Option<ProcessId>,
    pub detail: String,
}

const MAX_VIOLATIONS: usize = 100;

/// Incremental invariant checker. The first correct server to stamp an epoch fixes the
/// reference set for it; every later server must stamp the same set.
#[derive(Debug, Default)]
pub struct Checker {
    reference: Vec<ElementSet>,
    digests: Vec<Digest>,
    stamp_of: HashMap<Element, EpochNumber>,
    seen_epoch: BTreeMap<ProcessId, EpochNumber>,
    provenance: HashSet<Element>,
    recorded_payloads: HashSet<Digest>,
    set_delivers: BTreeMap<EpochNumber, Arc<Propset>>,
    violations: Vec<Violation>,
    checks: u64,
}

impl Checker {
    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn checks(&self) -> u64 {
        self.checks
    }

    pub fn reference(&self) -> &[ElementSet] {
        &self.reference
    }

    pub fn reference_digest(&self, h: EpochNumber) -> Option<Digest> {
        self.digests.get((h.0 as usize).checked_sub(1)?).copied()
    }

    pub fn reference_set(&self, h: EpochNumber) -> Option<&ElementSet> {
        self.reference.get((h.0 as usize).checked_sub(1)?)
    }

    fn violate(&mut self, property: &str, t: SimTime, server: Option<ProcessId>, detail: String) {
        if self.violations.len() < MAX_VIOLATIONS {
            self.violations.push(Violation { property: property.into(), t, server, detail });
        }
    }

    /// Every correct server must be handed the same decision for an instance.
    fn set_deliver(&mut self, now: SimTime, id: ProcessId, h: EpochNumber, ps: &Arc<Propset>) {
        match self.set_delivers.get(&h) {
            None => {
                self.set_delivers.insert(h, ps.clone());
            }
            Some(first) if !Arc::ptr_eq(first, ps) && **first != **ps => {
                self.violate("sbc-agreement", now, Some(id), format!("instance {h} delivered two decisions"));
            }
            Some(_) => {}
        }
    }

    fn record(&mut self, msg: &Msg) {
        match msg {
            Msg::Brb(frame) => {
                if let Some(p) = &frame.payload {
                    if self.recorded_payloads.insert(frame.digest) {
                        if let Ok(payload) = SetchainPayload::decode(p) {
                            self.provenance.extend(payload.elements().iter().cloned());
                        }
                    }
                }
            }
            Msg::Propose { prop, .. } => self.provenance.extend(prop.iter().cloned()),
            Msg::AddRequest(e) => {
                self.provenance.insert(e.clone());
            }
            _ => {}
        }
    }

    /// Runs after each handler at a correct server. Returns epochs stamped for the first
    /// time anywhere.
    fn observe(&mut self, now: SimTime, s: &mut Server, keyring: &Keyring) -> Vec<EpochNumber> {
        self.checks += 1;
        let id = s.id();
        for e in s.take_new_elements() {
            if !e.is_valid(keyring) {
                self.violate("validity", now, Some(id), format!("invalid element {} in theset", e.digest()));
            }
            // Signed hashes of correct servers are produced locally and broadcast; the
            // broadcast records them before any delivery.
            if !self.provenance.contains(&e) {
                self.violate("P8", now, Some(id), format!("element {} has no add/broadcast/proposal", e.digest()));
            }
        }
        let last = self.seen_epoch.get(&id).copied().unwrap_or_default();
        let mut fresh = Vec::new();
        for k in last.0 + 1..=s.epoch().0 {
            let h = EpochNumber(k);
            let set = s.history().get(h).expect("contiguous history");
            if let Some(e) = set.iter().find(|e| !s.theset().contains(e)) {
                self.violate("P1", now, Some(id), format!("{} stamped in {h} but not in theset", e.digest()));
            }
            match self.reference.get(k as usize - 1) {
                None => {
                    for e in set {
                        if let Some(prev) = self.stamp_of.insert(e.clone(), h) {
                            self.violate("P5", now, Some(id), format!("{} stamped in {prev} and {h}", e.digest()));
                        }
                    }
                    self.digests.push(hash_epoch(set));
                    self.reference.push(set.clone());
                    fresh.push(h);
                }
                Some(r) if r != set => {
                    self.violate("P6", now, Some(id), format!("epoch {h} differs from the first stamping"));
                }
                Some(_) => {}
            }
        }
        self.seen_epoch.insert(id, s.epoch());
        fresh
    }
}

pub enum Node {
    Correct(Box<Server>),
    Byzantine(Box<ByzServer>),
}

pub enum ClientKind {
    Dpo(DpoClient),
    Optimistic(OptimisticClient),
}

pub struct ClientState {
    pub kind: ClientKind,
    keys: KeyPair,
    ops_left: usize,
    next_op: SimTime,
    adds_issued: usize,
    gets_issued: usize,
    processed: usize,
}

impl ClientState {
    fn busy(&self) -> bool {
        match &self.kind {
            ClientKind::Dpo(c) => c.in_flight(),
            ClientKind::Optimistic(c) => c.busy(),
        }
    }
}

/// Counters and samples gathered while the cluster runs.
#[derive(Clone, Debug, Default)]
pub struct Metrics {
    pub adds_attempted: u64,
    /// Workload adds not yet stamped, with their request time.
    pub pending: HashMap<Element, SimTime>,
    /// (request tick, first stamp tick) per stamped workload add.
    pub latencies: Vec<(SimTime, SimTime)>,
    /// First tick at which each epoch was stamped by a correct server.
    pub epoch_times: Vec<SimTime>,
    /// Elements accepted by `add()` at correct servers.
    pub accepted: Vec<(ProcessId, Element)>,
    /// Elements clients and the workload asked the system to add.
    pub requested_adds: Vec<Element>,
    pub dpo_gets: u64,
    pub dpo_get_errors: u64,
    pub confirmations: u64,
    pub unconfirmed: u64,
    pub false_confirmations: u64,
    pub events: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quiescence {
    pub reached: bool,
    pub at: SimTime,
    pub drain_rounds: u64,
}

pub struct World {
    cfg: ClusterConfig,
    net: Simnet<Msg>,
    keyring: Arc<Keyring>,
    server_ids: Vec<ProcessId>,
    server_keys: BTreeMap<ProcessId, KeyPair>,
    correct: BTreeSet<ProcessId>,
    nodes: BTreeMap<ProcessId, Node>,
    sbc: SbcService,
    coalition: Coalition,
    clients: BTreeMap<ProcessId, ClientState>,
    workload_keys: KeyPair,
    rng: ChaCha8Rng,
    driver_round: u64,
    driver_on: bool,
    workload_on: bool,
    add_owed: u64,
    next_target: usize,
    checker: Checker,
    metrics: Metrics,
    quiescence: Option<Quiescence>,
}

impl World {
    pub fn new(cfg: ClusterConfig) -> Result<World, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net_cfg = NetConfig { rng_seed: cfg.seed ^ cfg.net.rng_seed, ..cfg.net };
        let mut net = Simnet::new(net_cfg)?;
        net.set_logging(cfg.log);
        if let Some(cost) = cfg.cost {
            net.set_cost(Box::new(move |_, kind, m: &Msg| match kind {
                ProcessKind::CorrectServer | ProcessKind::ByzantineServer => cost.cost(m),
                _ => 0,
            }));
        }

        let server_ids: Vec<ProcessId> = (0..cfg.n as u32).map(ProcessId).collect();
        let byzantine: BTreeSet<ProcessId> = if cfg.adversary == AdversaryKind::None {
            BTreeSet::new()
        } else {
            sample(&mut rng, cfg.n, cfg.f).into_iter().map(|i| server_ids[i]).collect()
        };
        let correct: BTreeSet<ProcessId> = server_ids.iter().copied().filter(|p| !byzantine.contains(p)).collect();

        let mut ring = Keyring::new(cfg.scheme, cfg.seed);
        let server_keys: BTreeMap<ProcessId, KeyPair> = server_ids.iter().map(|&p| (p, ring.register(p))).collect();
        let workload_keys = ring.register(WORKLOAD_ID);
        let wl = cfg.workload;
        let client_ids: Vec<ProcessId> =
            (0..(wl.dpo_clients + wl.optimistic_clients) as u32).map(|i| ProcessId(CLIENT_BASE + i)).collect();
        let client_keys: Vec<KeyPair> = client_ids.iter().map(|&c| ring.register(c)).collect();
        let keyring = Arc::new(ring);

        let server_cfg = ServerConfig { f: cfg.f, algorithm: cfg.algorithm, agg: cfg.agg, sign_epochs: cfg.sign_epochs };
        let mut nodes = BTreeMap::new();
        for &id in &server_ids {
            let keys = server_keys[&id].clone();
            if correct.contains(&id) {
                net.register(id, ProcessKind::CorrectServer)?;
                let s = Server::new(server_cfg.clone(), keys, keyring.clone(), server_ids.clone(), SBC_ID);
                nodes.insert(id, Node::Correct(Box::new(s)));
            } else {
                net.register(id, ProcessKind::ByzantineServer)?;
                let b = ByzServer::new(
                    cfg.adversary,
                    server_cfg.clone(),
                    keys,
                    keyring.clone(),
                    server_ids.clone(),
                    SBC_ID,
                    cfg.havoc,
                    rng.gen(),
                );
                nodes.insert(id, Node::Byzantine(Box::new(b)));
            }
        }
        let coalition =
            Coalition { knowledge: ElementSet::new(), keys: byzantine.iter().map(|p| server_keys[p].clone()).collect() };
        net.register(SBC_ID, ProcessKind::Service)?;
        net.register(DRIVER_ID, ProcessKind::Service)?;
        net.register(WORKLOAD_ID, ProcessKind::Client)?;

        let retry = cfg.retry.unwrap_or_else(|| RetryPolicy::for_epoch_period(cfg.epoch_period));
        let mut clients = BTreeMap::new();
        for (i, (&id, keys)) in client_ids.iter().zip(client_keys).enumerate() {
            net.register(id, ProcessKind::Client)?;
            let kind = if i < wl.dpo_clients {
                ClientKind::Dpo(DpoClient::new(id, cfg.f, server_ids.clone(), wl.client_timeout))
            } else {
                ClientKind::Optimistic(OptimisticClient::new(id, cfg.f, server_ids.clone(), keyring.clone(), retry))
            };
            let first = SimTime(rng.gen_range(0..=wl.client_gap_max));
            let state = ClientState {
                kind,
                keys,
                ops_left: wl.client_ops,
                next_op: first,
                adds_issued: 0,
                gets_issued: 0,
                processed: 0,
            };
            clients.insert(id, state);
        }

        let sbc = SbcService::new(cfg.sbc, cfg.net.gst, server_ids.clone(), correct.clone());
        Ok(World {
            cfg,
            net,
            keyring,
            server_ids,
            server_keys,
            correct,
            nodes,
            sbc,
            coalition,
            clients,
            workload_keys,
            rng,
            driver_round: 0,
            driver_on: false,
            workload_on: false,
            add_owed: 0,
            next_target: 0,
            checker: Checker::default(),
            metrics: Metrics::default(),
            quiescence: None,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn net(&self) -> &Simnet<Msg> {
        &self.net
    }

    pub fn now(&self) -> SimTime {
        self.net.now()
    }

    pub fn keyring(&self) -> &Arc<Keyring> {
        &self.keyring
    }

    pub fn server_ids(&self) -> &[ProcessId] {
        &self.server_ids
    }

    pub fn correct_ids(&self) -> &BTreeSet<ProcessId> {
        &self.correct
    }

    pub fn server(&self, id: ProcessId) -> Option<&Server> {
        match self.nodes.get(&id)? {
            Node::Correct(s) => Some(s),
            Node::Byzantine(_) => None,
        }
    }

    pub fn byzantine(&self) -> impl Iterator<Item = &ByzServer> {
        self.nodes.values().filter_map(|n| match n {
            Node::Byzantine(b) => Some(&**b),
            Node::Correct(_) => None,
        })
    }

    pub fn correct_servers(&self) -> impl Iterator<Item = &Server> {
        self.nodes.values().filter_map(|n| match n {
            Node::Correct(s) => Some(&**s),
            Node::Byzantine(_) => None,
        })
    }

    pub fn sbc(&self) -> &SbcService {
        &self.sbc
    }

    pub fn coalition(&self) -> &Coalition {
        &self.coalition
    }

    pub fn clients(&self) -> impl Iterator<Item = (ProcessId, &ClientKind)> {
        self.clients.iter().map(|(id, c)| (*id, &c.kind))
    }

    pub fn checker(&self) -> &Checker {
        &self.checker
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn violations(&self) -> &[Violation] {
        self.checker.violations()
    }

    pub fn quiescence(&self) -> Option<&Quiescence> {
        self.quiescence.as_ref()
    }

    /// Keys of a registered server, for tests that craft signatures.
    pub fn server_keys(&self, id: ProcessId) -> Option<&KeyPair> {
        self.server_keys.get(&id)
    }

    fn dispatch(&mut self, from: ProcessId, out: Outbox, depart: SimTime) {
        for (to, msg) in out.msgs {
            self.checker.record(&msg);
            self.net.send_at(depart, from, to, msg).expect("recipients are registered");
        }
        for (at, t) in out.timers {
            self.net.schedule(at, from, Msg::Timer(t)).expect("timer owner is registered");
        }
    }

    /// Arms the epoch driver, the workload and the adversaries.
    pub fn start(&mut self) {
        let now = self.now();
        self.driver_on = true;
        self.net.schedule(now + self.cfg.epoch_period, DRIVER_ID, Msg::Timer(Timer::EpochDriver)).unwrap();
        self.workload_on = true;
        if self.cfg.workload.add_rate > 0 || !self.clients.is_empty() {
            self.net.schedule(now, WORKLOAD_ID, Msg::Timer(Timer::Workload)).unwrap();
        }
        let ids: Vec<ProcessId> = self.byzantine().map(|b| b.id()).collect();
        for id in ids {
            let mut out = Outbox::default();
            if let Some(Node::Byzantine(b)) = self.nodes.get_mut(&id) {
                b.start(now, &mut out);
            }
            self.dispatch(id, out, now);
        }
    }

    /// Handles one event due at or before `until`. Returns false when there is none.
    pub fn step(&mut self, until: SimTime) -> bool {
        let Some(d) = self.net.next(until) else { return false };
        self.handle(d);
        true
    }

    pub fn run_until(&mut self, t: SimTime) {
        while self.step(t) {}
        self.net.advance_to(t);
    }

    fn handle(&mut self, d: Delivery<Msg>) {
        self.metrics.events += 1;
        let (now, done) = (d.now, d.done);
        let from = d.envelope.from;
        let to = d.envelope.to;
        let msg = d.envelope.body;
        let mut out = Outbox::default();
        match to {
            SBC_ID => match msg {
                Msg::Propose { h, prop } if self.nodes.contains_key(&from) => {
                    self.sbc.on_propose(now, from, h, prop, &mut out)
                }
                Msg::Timer(t) => self.sbc.on_timer(now, t, &mut out),
                _ => {}
            },
            DRIVER_ID => {
                if let Msg::Timer(Timer::EpochDriver) = msg {
                    self.drive(now);
                    if self.driver_on {
                        self.net.schedule(now + self.cfg.epoch_period, DRIVER_ID, msg).unwrap();
                    }
                }
            }
            WORKLOAD_ID => {
                if let Msg::Timer(Timer::Workload) = msg {
                    self.workload_tick(now);
                }
            }
            id if self.nodes.contains_key(&id) => self.handle_server(id, from, msg, now, &mut out),
            id if self.clients.contains_key(&id) => self.handle_client(id, from, msg, now, &mut out),
            _ => {}
        }
        self.dispatch(to, out, done);
    }

    fn handle_server(&mut self, id: ProcessId, from: ProcessId, msg: Msg, now: SimTime, out: &mut Outbox) {
        match self.nodes.get_mut(&id).unwrap() {
            Node::Byzantine(b) => b.handle(from, msg, now, &mut self.coalition, out),
            Node::Correct(s) => {
                match msg {
                    Msg::Brb(frame) => s.on_brb_frame(from, frame, out),
                    Msg::SetDeliver { h, propset } if from == SBC_ID => {
                        self.checker.set_deliver(now, id, h, &propset);
                        s.on_set_deliver(h, propset, now, out)
                    }
                    Msg::AddRequest(e) => {
                        if s.add(e.clone(), now, out).is_ok() {
                            self.metrics.accepted.push((id, e));
                        }
                    }
                    Msg::EpochIncRequest(h) => {
                        let _ = s.epoch_inc(h, out);
                    }
                    Msg::GetRequest { id: req } => {
                        out.send(from, Msg::GetReply { id: req, result: Arc::new(s.get()) });
                    }
                    Msg::Timer(Timer::AggFlush) => s.on_flush_timer(now, out),
                    _ => {}
                }
                let fresh = self.checker.observe(now, s, &self.keyring);
                for h in fresh {
                    self.on_first_stamp(h, now);
                }
            }
        }
    }

    fn on_first_stamp(&mut self, h: EpochNumber, now: SimTime) {
        self.metrics.epoch_times.push(now);
        if self.metrics.pending.is_empty() {
            return;
        }
        let set = self.checker.reference_set(h).expect("just recorded");
        for e in set {
            if let Some(t) = self.metrics.pending.remove(e) {
                self.metrics.latencies.push((t, now));
            }
        }
    }

    fn drive(&mut self, now: SimTime) {
        let k = self.cfg.f + 1;
        let n = self.server_ids.len();
        let start = (self.driver_round as usize * k) % n;
        self.driver_round += 1;
        for j in 0..k {
            let id = self.server_ids[(start + j) % n];
            let mut out = Outbox::default();
            if let Some(Node::Correct(s)) = self.nodes.get_mut(&id) {
                let h = s.epoch().next();
                let _ = s.epoch_inc(h, &mut out);
            }
            self.dispatch(id, out, now);
        }
    }

    fn workload_tick(&mut self, now: SimTime) {
        if !self.workload_on {
            return;
        }
        let wl = self.cfg.workload;
        self.add_owed += wl.add_rate * wl.tick.0;
        let count = self.add_owed / SimTime::TICKS_PER_SECOND;
        self.add_owed %= SimTime::TICKS_PER_SECOND;
        let targets: Vec<ProcessId> = self.correct.iter().copied().collect();
        let mut out = Outbox::default();
        for _ in 0..count {
            let e = Element::random(&self.workload_keys, &mut self.rng);
            let to = targets[self.next_target % targets.len()];
            self.next_target += 1;
            self.metrics.adds_attempted += 1;
            self.metrics.pending.insert(e.clone(), now);
            self.metrics.requested_adds.push(e.clone());
            out.send(to, Msg::AddRequest(e));
        }
        self.dispatch(WORKLOAD_ID, out, now);

        let ids: Vec<ProcessId> = self.clients.keys().copied().collect();
        for id in ids {
            let c = self.clients.get_mut(&id).unwrap();
            if c.ops_left == 0 || c.next_op > now || c.busy() {
                continue;
            }
            c.ops_left -= 1;
            c.next_op = now + self.rng.gen_range(wl.client_gap_min..=wl.client_gap_max.max(wl.client_gap_min));
            let mut out = Outbox::default();
            match &mut c.kind {
                ClientKind::Dpo(d) => {
                    if c.adds_issued <= c.gets_issued {
                        let e = Element::random(&c.keys, &mut self.rng);
                        self.metrics.requested_adds.push(e.clone());
                        d.add(e, &mut out);
                        c.adds_issued += 1;
                    } else {
                        d.get(now, &mut out);
                        c.gets_issued += 1;
                    }
                }
                ClientKind::Optimistic(o) => {
                    let e = Element::random(&c.keys, &mut self.rng);
                    self.metrics.requested_adds.push(e.clone());
                    o.start(e, now, &mut out);
                    c.adds_issued += 1;
                }
            }
            self.dispatch(id, out, now);
        }
        if self.workload_on {
            self.net.schedule(now + wl.tick, WORKLOAD_ID, Msg::Timer(Timer::Workload)).unwrap();
        }
    }

    fn handle_client(&mut self, id: ProcessId, from: ProcessId, msg: Msg, now: SimTime, out: &mut Outbox) {
        let c = self.clients.get_mut(&id).unwrap();
        match (&mut c.kind, msg) {
            (ClientKind::Dpo(d), Msg::GetReply { id: req, result }) => d.on_reply(from, req, &result),
            (ClientKind::Dpo(d), Msg::Timer(Timer::Client)) => d.on_timer(now),
            (ClientKind::Optimistic(o), Msg::GetReply { id: req, result }) => o.on_reply(from, req, &result, now, out),
            (ClientKind::Optimistic(o), Msg::Timer(Timer::Client)) => o.on_timer(now, out),
            _ => {}
        }
        self.check_client(id, now);
    }

    fn check_client(&mut self, id: ProcessId, now: SimTime) {
        let c = self.clients.get_mut(&id).unwrap();
        match &c.kind {
            ClientKind::Dpo(d) => {
                let fresh: Vec<_> = d.results()[c.processed..].to_vec();
                c.processed = d.results().len();
                for r in fresh {
                    match r {
                        Ok(r) => {
                            self.metrics.dpo_gets += 1;
                            dpo_soundness(&mut self.checker, &r, now, id);
                        }
                        Err(_) => self.metrics.dpo_get_errors += 1,
                    }
                }
            }
            ClientKind::Optimistic(o) => {
                let fresh: Vec<_> = o.outcomes()[c.processed..].to_vec();
                c.processed = o.outcomes().len();
                for (e, outcome) in fresh {
                    match outcome {
                        Outcome::Confirmed(conf) => {
                            self.metrics.confirmations += 1;
                            let ok = self.checker.reference_digest(conf.epoch) == Some(conf.epoch_digest)
                                && self.checker.reference_set(conf.epoch).is_some_and(|s| s.contains(&e));
                            if !ok {
                                self.metrics.false_confirmations += 1;
                                self.checker.violate(
                                    "optimistic-safety",
                                    now,
                                    None,
                                    format!("client {id} confirmed {} in {} without a correct stamp", e.digest(), conf.epoch),
                                );
                            }
                        }
                        Outcome::Unconfirmed { .. } => self.metrics.unconfirmed += 1,
                    }
                }
            }
        }
    }

    fn quiescent(&self) -> bool {
        if self.net.in_flight() > 0 || !self.sbc.idle() || self.clients.values().any(|c| c.busy()) {
            return false;
        }
        let mut epochs = self.correct_servers().map(|s| s.epoch());
        let first = epochs.next();
        self.correct_servers().all(|s| s.unstamped().is_empty() && s.tobroadcast_len() == 0)
            && epochs.all(|e| Some(e) == first)
    }

    /// Stops the workload and adversaries and keeps issuing epoch rounds until every
    /// correct server has stamped everything it holds and the network is empty.
    pub fn drain(&mut self) -> Quiescence {
        self.workload_on = false;
        self.driver_on = false;
        for n in self.nodes.values_mut() {
            if let Node::Byzantine(b) = n {
                b.stop();
            }
        }
        let period = self.cfg.epoch_period;
        let mut rounds = 0;
        // Let in-flight work settle before the first drain round.
        self.run_until(self.now() + period);
        while !self.quiescent() {
            if rounds >= self.cfg.max_drain_rounds {
                let q = Quiescence { reached: false, at: self.now(), drain_rounds: rounds };
                self.checker.violate("quiescence", self.now(), None, format!("not quiescent after {rounds} rounds"));
                self.quiescence = Some(q.clone());
                return q;
            }
            let now = self.now();
            self.drive(now);
            self.run_until(now + period);
            rounds += 1;
        }
        let q = Quiescence { reached: true, at: self.now(), drain_rounds: rounds };
        self.quiescence = Some(q.clone());
        q
    }

    /// Starts, runs for `duration`, drains and checks the quiescent state.
    pub fn run(&mut self, duration: SimTime) -> &[Violation] {
        self.start();
        self.run_until(duration);
        if self.drain().reached {
            self.final_check();
        }
        self.violations()
    }

    /// Liveness properties at quiescence, plus oracle convergence for Byzantine-free runs.
    pub fn final_check(&mut self) {
        let now = self.now();
        let servers: Vec<&Server> = self.correct_servers().collect();
        let mut found = Vec::new();
        for (id, e) in &self.metrics.accepted {
            if let Some(s) = self.server(*id) {
                if !s.theset().contains(e) {
                    found.push(("P2", Some(*id), format!("accepted {} missing from theset", e.digest())));
                }
            }
        }
        if let Some(first) = servers.first() {
            for s in &servers[1..] {
                if s.theset() != first.theset() {
                    found.push(("P3", Some(s.id()), format!("theset differs from {}", first.id())));
                }
                if s.history() != first.history() {
                    found.push(("P6", Some(s.id()), format!("history differs from {}", first.id())));
                }
            }
        }
        for s in &servers {
            if !s.unstamped().is_empty() {
                found.push(("P4", Some(s.id()), format!("{} elements never stamped", s.unstamped().len())));
            }
            let missing = self.metrics.requested_adds.iter().filter(|e| !s.history().contains(e)).count();
            if missing > 0 {
                found.push(("get-after-add", Some(s.id()), format!("{missing} requested adds not stamped")));
            }
        }
        if self.cfg.adversary == AdversaryKind::None {
            if let Some(detail) = self.oracle_mismatch() {
                found.push(("oracle", None, detail));
            }
        }
        for (p, s, d) in found {
            self.checker.violate(p, now, s, d);
        }
    }

    /// Replays every accepted element (and the signed hashes the correct servers are
    /// expected to produce) through the sequential implementation and compares stamped sets.
    fn oracle_mismatch(&self) -> Option<String> {
        let first = self.correct_servers().next()?;
        let mut central = Central::new(self.keyring.clone());
        for (_, e) in &self.metrics.accepted {
            let _ = central.add(e.clone());
        }
        if self.cfg.sign_epochs {
            for s in self.correct_servers() {
                for (h, set) in s.history().iter() {
                    if set.iter().any(|e| SignedEpochHash::from_element(e).is_none()) {
                        let seh = SignedEpochHash::sign(&self.server_keys[&s.id()], h, hash_epoch(set));
                        let _ = central.add(seh.to_element());
                    }
                }
            }
        }
        central.epoch_inc(EpochNumber(1)).expect("fresh oracle");
        let oracle: ElementSet = central.get().history.elements().cloned().collect();
        let stamped: ElementSet = first.history().elements().cloned().collect();
        if oracle != stamped {
            return Some(format!("stamped {} elements, oracle {}", stamped.len(), oracle.len()));
        }
        if first.history().find_overlap().is_some() {
            return Some("stamped epochs overlap".into());
        }
        None
    }

    /// Requests sent by a client, counted from the message log (requires `log`).
    pub fn requests_from(&self, client: ProcessId) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in self.net.log() {
            if e.from == client && e.kind != "timer" {
                *m.entry(e.kind.clone()).or_insert(0) += 1;
            }
        }
        m
    }
}

fn dpo_soundness(checker: &mut Checker, r: &DpoGetResult, now: SimTime, client: ProcessId) {
    for (h, set) in r.history.iter() {
        if checker.reference_set(h) != Some(set) {
            checker.violate("dpo-soundness", now, None, format!("client {client} returned a wrong epoch {h}"));
        }
    }
    if let Some(e) = r.history.elements().find(|e| !r.theset.contains(e)) {
        checker.violate("dpo-soundness", now, None, format!("client {client}: stamped {} not in set", e.digest()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, f: usize) -> ClusterConfig {
        ClusterConfig { n, f, ..Default::default() }
    }

    #[test]
    fn rejects_too_few_servers() {
        assert!(matches!(World::new(cfg(3, 1)), Err(ConfigError::TooFewServers { .. })));
    }

    #[test]
    fn empty_run_stamps_empty_epochs() {
        let mut w = World::new(cfg(4, 1)).unwrap();
        let v = w.run(SimTime(2000)).to_vec();
        assert!(v.is_empty(), "{v:?}");
        let e = w.correct_servers().next().unwrap().epoch();
        assert!(e.0 >= 8, "{e}");
    }

    #[test]
    fn workload_adds_are_stamped_everywhere() {
        let mut c = cfg(4, 1);
        c.workload.add_rate = 50_000;
        c.workload.dpo_clients = 1;
        c.workload.client_ops = 6;
        let mut w = World::new(c).unwrap();
        let v = w.run(SimTime(3000)).to_vec();
        assert!(v.is_empty(), "{v:?}");
        assert!(w.metrics().adds_attempted >= 100);
        assert_eq!(w.metrics().latencies.len() as u64, w.metrics().adds_attempted);
        assert_eq!(w.metrics().dpo_gets, 3);
    }

    #[test]
    fn same_seed_same_outcome() {
        let mut c = cfg(4, 1);
        c.adversary = AdversaryKind::Havoc;
        c.workload.add_rate = 20_000;
        c.seed = 9;
        let run = |c: ClusterConfig| {
            let mut w = World::new(c).unwrap();
            w.run(SimTime(1500));
            let s = w.correct_servers().next().unwrap();
            (s.snapshot(), w.metrics().events)
        };
        assert_eq!(run(c.clone()), run(c));
    }
}
