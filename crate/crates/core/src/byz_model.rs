//! Executable semantics of two abstract models of a Setchain deployment.
//!
//! In the first model `f` Byzantine servers run alongside the correct ones and
//! share everything they learn. In the second a single non-deterministic
//! process ([`MODEL_B`]) stands in for all of them. Both models use the same
//! configuration shape; they differ only in which process ids are Byzantine.
//! Traces are produced by seeded random exploration and mapped in both
//! directions, with observational equivalence checked after every step.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::ProcessId;

/// The stand-in adversary of the single-adversary model.
pub const MODEL_B: ProcessId = ProcessId(999);

/// Abstract element. Validity is a fixed property of the element, which is all
/// the model needs from signatures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Elem {
    pub id: u32,
    pub valid: bool,
}

pub type ElemSet = BTreeSet<Elem>;

fn valid_part(s: &ElemSet) -> impl Iterator<Item = Elem> + '_ {
    s.iter().copied().filter(|e| e.valid)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrbPayload {
    Add(Elem),
    EpochInc(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetMsg {
    Brb(BrbPayload),
    Proposal { h: u64, prop: ElemSet },
}

impl NetMsg {
    fn valid_elements(&self) -> ElemSet {
        match self {
            NetMsg::Brb(BrbPayload::Add(e)) if e.valid => [*e].into(),
            NetMsg::Brb(_) => ElemSet::new(),
            NetMsg::Proposal { prop, .. } => valid_part(prop).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "kebab-case")]
pub enum EventTag {
    Get,
    Add { e: Elem },
    BrbBroadcast { x: BrbPayload },
    BrbDeliver { x: BrbPayload },
    EpochInc { h: u64 },
    SbcPropose { h: u64, prop: ElemSet },
    SbcInform { h: u64, prop: ElemSet },
    SbcSetDeliver { h: u64, propset: ElemSet },
    SbcConsensus { h: u64, propset: ElemSet },
    Nop,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEvent {
    #[serde(flatten)]
    pub tag: EventTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server: Option<ProcessId>,
}

impl ModelEvent {
    pub fn at(server: ProcessId, tag: EventTag) -> ModelEvent {
        ModelEvent { tag, server: Some(server) }
    }

    pub fn nop() -> ModelEvent {
        ModelEvent { tag: EventTag::Nop, server: None }
    }

    pub fn consensus(h: u64, propset: ElemSet) -> ModelEvent {
        ModelEvent { tag: EventTag::SbcConsensus { h, propset }, server: None }
    }

    /// Consensus and nop have no server; everything else must.
    pub fn is_well_formed(&self) -> bool {
        matches!(self.tag, EventTag::Nop | EventTag::SbcConsensus { .. }) == self.server.is_none()
    }

    fn is_reception(&self) -> bool {
        matches!(self.tag, EventTag::BrbDeliver { .. } | EventTag::SbcInform { .. })
    }

    fn retarget(&self, server: ProcessId) -> ModelEvent {
        ModelEvent { tag: self.tag.clone(), server: Some(server) }
    }
}

/// Valid elements an event exposes to the process executing it.
pub fn valid_elements(tag: &EventTag) -> ElemSet {
    match tag {
        EventTag::Add { e } | EventTag::BrbDeliver { x: BrbPayload::Add(e) } if e.valid => [*e].into(),
        EventTag::SbcInform { prop, .. } => valid_part(prop).collect(),
        EventTag::SbcSetDeliver { propset, .. } => valid_part(propset).collect(),
        _ => ElemSet::new(),
    }
}

pub type Multiset = BTreeMap<NetMsg, usize>;

fn multiset(seq: &[NetMsg]) -> Multiset {
    let mut m = Multiset::new();
    for x in seq {
        *m.entry(x.clone()).or_default() += 1;
    }
    m
}

fn ms_add(a: &Multiset, b: &Multiset) -> Multiset {
    let mut m = a.clone();
    for (k, v) in b {
        *m.entry(k.clone()).or_default() += v;
    }
    m
}

fn ms_subset(a: &Multiset, b: &Multiset) -> bool {
    a.iter().all(|(k, v)| b.get(k).copied().unwrap_or(0) >= *v)
}

/// Maps as lists of pairs, so non-string keys survive any serde buffering.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(m: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub sent: Vec<NetMsg>,
    #[serde(with = "pairs")]
    pub pending: Multiset,
    pub received: Vec<NetMsg>,
}

/// Per-process sent/pending/received bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkMap {
    #[serde(with = "pairs")]
    pub procs: BTreeMap<ProcessId, Channel>,
}

impl NetworkMap {
    pub fn new(ids: impl IntoIterator<Item = ProcessId>) -> NetworkMap {
        NetworkMap { procs: ids.into_iter().map(|p| (p, Channel::default())).collect() }
    }

    /// Appends to the sender's sent sequence and to every pending multiset, the sender's included.
    pub fn send(&mut self, m: NetMsg, s: ProcessId) {
        self.procs.get_mut(&s).expect("sender in network").sent.push(m.clone());
        for ch in self.procs.values_mut() {
            *ch.pending.entry(m.clone()).or_default() += 1;
        }
    }

    /// Moves one copy of `m` from pending to received at `s`. False if none was pending.
    pub fn receive(&mut self, m: &NetMsg, s: ProcessId) -> bool {
        let Some(ch) = self.procs.get_mut(&s) else { return false };
        match ch.pending.get_mut(m) {
            Some(c) if *c > 0 => {
                *c -= 1;
                if *c == 0 {
                    ch.pending.remove(m);
                }
                ch.received.push(m.clone());
                true
            }
            _ => false,
        }
    }

    pub fn pending_count(&self, s: ProcessId, m: &NetMsg) -> usize {
        self.procs.get(&s).and_then(|ch| ch.pending.get(m)).copied().unwrap_or(0)
    }

    fn has_proposed(&self, s: ProcessId, h: u64) -> bool {
        self.procs[&s].sent.iter().any(|m| matches!(m, NetMsg::Proposal { h: k, .. } if *k == h))
    }

    /// Every set proposed for instance `h` by anyone.
    pub fn proposals(&self, h: u64) -> Vec<&ElemSet> {
        self.procs
            .values()
            .flat_map(|ch| ch.sent.iter())
            .filter_map(|m| match m {
                NetMsg::Proposal { h: k, prop } if *k == h => Some(prop),
                _ => None,
            })
            .collect()
    }
}

/// Local state of a correct server: the set, its epochs, and the current epoch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalState {
    pub set: ElemSet,
    #[serde(with = "pairs")]
    pub history: BTreeMap<u64, ElemSet>,
    pub epoch: u64,
}

impl LocalState {
    fn stamped(&self) -> ElemSet {
        self.history.values().flatten().copied().collect()
    }

    fn unstamped(&self) -> ElemSet {
        let stamped = self.stamped();
        self.set.difference(&stamped).copied().collect()
    }
}

/// A configuration of either model. `knowledge` is the shared Byzantine
/// knowledge in the many-adversary model and the local state of `b` in the
/// single-adversary model. Correct servers are exactly the keys of `sigma`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    #[serde(with = "pairs")]
    pub sigma: BTreeMap<ProcessId, LocalState>,
    pub delta: NetworkMap,
    #[serde(with = "pairs")]
    pub history: BTreeMap<u64, ElemSet>,
    pub knowledge: ElemSet,
}

pub type GammaConfig = Config;
pub type GammaPrimeConfig = Config;

impl Config {
    fn byzantine(&self) -> Vec<ProcessId> {
        self.delta.procs.keys().filter(|p| !self.sigma.contains_key(p)).copied().collect()
    }
}

/// Which processes exist and which of them are Byzantine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub correct: Vec<ProcessId>,
    pub byzantine: Vec<ProcessId>,
}

impl Model {
    /// `n` servers `0..n`; `byzantine` must be a subset.
    pub fn gamma(n: u32, byzantine: Vec<ProcessId>) -> Model {
        let correct = (0..n).map(ProcessId).filter(|p| !byzantine.contains(p)).collect();
        Model { correct, byzantine }
    }

    /// Byzantine ids drawn as a seeded sample of size `f`.
    pub fn gamma_seeded(n: u32, f: usize, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut byz: Vec<ProcessId> =
            rand::seq::index::sample(&mut rng, n as usize, f).into_iter().map(|i| ProcessId(i as u32)).collect();
        byz.sort();
        Model::gamma(n, byz)
    }

    /// The same correct servers with all Byzantine ones collapsed into `b`.
    pub fn prime(&self) -> Model {
        Model { correct: self.correct.clone(), byzantine: vec![MODEL_B] }
    }

    pub fn f(&self) -> usize {
        self.byzantine.len()
    }

    pub fn is_byzantine(&self, p: ProcessId) -> bool {
        self.byzantine.contains(&p)
    }

    fn contains(&self, p: ProcessId) -> bool {
        self.correct.contains(&p) || self.is_byzantine(p)
    }

    fn all(&self) -> Vec<ProcessId> {
        self.correct.iter().chain(&self.byzantine).copied().collect()
    }

    pub fn initial(&self) -> Config {
        Config {
            sigma: self.correct.iter().map(|&p| (p, LocalState::default())).collect(),
            delta: NetworkMap::new(self.all()),
            history: BTreeMap::new(),
            knowledge: ElemSet::new(),
        }
    }

    pub fn enabled(&self, ev: &ModelEvent, c: &Config) -> bool {
        use EventTag::*;
        let Some(s) = ev.server else {
            return match &ev.tag {
                Nop => true,
                SbcConsensus { h, propset } => {
                    let proposals = c.delta.proposals(*h);
                    *h >= 1
                        && (*h == 1 || c.history.contains_key(&(h - 1)))
                        && !c.history.contains_key(h)
                        && !proposals.is_empty()
                        && propset.iter().all(|e| proposals.iter().any(|p| p.contains(e)))
                }
                _ => false,
            };
        };
        if !self.contains(s) {
            return false;
        }
        let byz = self.is_byzantine(s);
        let local = c.sigma.get(&s);
        let epoch = local.map_or(0, |l| l.epoch);
        match &ev.tag {
            Nop | SbcConsensus { .. } => false,
            Get => true,
            Add { e } => e.valid && (byz || !local.is_some_and(|l| l.set.contains(e))),
            BrbBroadcast { x } => {
                byz && match x {
                    BrbPayload::EpochInc(_) => true,
                    BrbPayload::Add(e) => !e.valid || c.knowledge.contains(e),
                }
            }
            BrbDeliver { x: x @ BrbPayload::Add(e) } => {
                e.valid && c.delta.pending_count(s, &NetMsg::Brb(x.clone())) > 0
            }
            BrbDeliver { x: x @ BrbPayload::EpochInc(h) } => {
                c.delta.pending_count(s, &NetMsg::Brb(x.clone())) > 0
                    && (byz || *h < epoch + 1 || (*h == epoch + 1 && !c.delta.has_proposed(s, *h)))
            }
            EpochInc { h } => byz || *h == epoch + 1,
            SbcPropose { prop, .. } => byz && valid_part(prop).all(|e| c.knowledge.contains(&e)),
            SbcInform { h, prop } => c.delta.pending_count(s, &NetMsg::Proposal { h: *h, prop: prop.clone() }) > 0,
            SbcSetDeliver { h, propset } => c.history.get(h) == Some(propset) && (byz || *h == epoch + 1),
        }
    }

    /// Successor configuration. Panics on a disabled event: that is a bug in the caller.
    pub fn effect(&self, ev: &ModelEvent, c: &Config) -> Config {
        assert!(self.enabled(ev, c), "effect of disabled event {ev:?}");
        let mut next = c.clone();
        self.apply(ev, &mut next);
        next
    }

    fn apply(&self, ev: &ModelEvent, c: &mut Config) {
        use EventTag::*;
        let Some(s) = ev.server else {
            if let SbcConsensus { h, propset } = &ev.tag {
                c.history.insert(*h, propset.clone());
            }
            return;
        };
        let byz = self.is_byzantine(s);
        if byz {
            c.knowledge.extend(valid_elements(&ev.tag));
        }
        match &ev.tag {
            Nop | Get | SbcConsensus { .. } => {}
            Add { e } => {
                if !byz {
                    c.delta.send(NetMsg::Brb(BrbPayload::Add(*e)), s);
                }
            }
            BrbDeliver { x } => {
                c.delta.receive(&NetMsg::Brb(x.clone()), s);
                if byz {
                    return;
                }
                let local = c.sigma.get_mut(&s).expect("correct server state");
                match x {
                    BrbPayload::Add(e) => {
                        if e.valid {
                            local.set.insert(*e);
                        }
                    }
                    BrbPayload::EpochInc(h) => {
                        if *h == local.epoch + 1 {
                            let prop = local.unstamped();
                            c.delta.send(NetMsg::Proposal { h: *h, prop }, s);
                        }
                    }
                }
            }
            EpochInc { h } => {
                if !byz {
                    c.delta.send(NetMsg::Brb(BrbPayload::EpochInc(*h)), s);
                }
            }
            BrbBroadcast { x } => c.delta.send(NetMsg::Brb(x.clone()), s),
            SbcPropose { h, prop } => c.delta.send(NetMsg::Proposal { h: *h, prop: prop.clone() }, s),
            SbcInform { h, prop } => {
                c.delta.receive(&NetMsg::Proposal { h: *h, prop: prop.clone() }, s);
            }
            SbcSetDeliver { h, propset } => {
                if byz {
                    return;
                }
                let local = c.sigma.get_mut(&s).expect("correct server state");
                let stamped = local.stamped();
                let fresh: ElemSet = valid_part(propset).filter(|e| !stamped.contains(e)).collect();
                local.set.extend(fresh.iter().copied());
                local.history.insert(*h, fresh);
                local.epoch = *h;
            }
        }
    }

    /// Configurations along `events` from the initial one, checking each step is enabled.
    pub fn replay(&self, events: &[ModelEvent]) -> Result<Vec<Config>, StepError> {
        let mut configs = vec![self.initial()];
        for (i, ev) in events.iter().enumerate() {
            let c = configs.last().expect("non-empty");
            if !ev.is_well_formed() || !self.enabled(ev, c) {
                return Err(StepError { step: i, event: ev.clone() });
            }
            configs.push(self.effect(ev, c));
        }
        Ok(configs)
    }

    /// Seeded random exploration. Receptions weigh three times as much as anything else.
    pub fn generate(&self, len: usize, seed: u64) -> Vec<ModelEvent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fresh = 0u32;
        let mut c = self.initial();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let cands = self.candidates(&c, &mut rng, &mut fresh);
            let dist = WeightedIndex::new(cands.iter().map(|(_, w)| *w)).expect("nop is always a candidate");
            let ev = cands[dist.sample(&mut rng)].0.clone();
            c = self.effect(&ev, &c);
            out.push(ev);
        }
        out
    }

    fn candidates<R: Rng>(&self, c: &Config, rng: &mut R, fresh: &mut u32) -> Vec<(ModelEvent, u32)> {
        use EventTag::*;
        let mut new_elem = |valid: bool| {
            *fresh += 1;
            Elem { id: *fresh, valid }
        };
        let all = self.all();
        let mut v = vec![(ModelEvent::nop(), 1)];
        v.push((ModelEvent::at(*all.choose(rng).expect("servers"), Get), 1));

        // Clients add fresh elements, or an element some correct server already holds.
        let holder = *all.choose(rng).expect("servers");
        v.push((ModelEvent::at(holder, Add { e: new_elem(true) }), 2));
        let seen: Vec<Elem> = c.sigma.values().flat_map(|l| l.set.iter().copied()).collect();
        if let Some(e) = seen.choose(rng) {
            v.push((ModelEvent::at(*all.choose(rng).expect("servers"), Add { e: *e }), 1));
        }

        for &s in &all {
            for m in c.delta.procs[&s].pending.keys() {
                let tag = match m {
                    NetMsg::Brb(x) => BrbDeliver { x: x.clone() },
                    NetMsg::Proposal { h, prop } => SbcInform { h: *h, prop: prop.clone() },
                };
                v.push((ModelEvent::at(s, tag), 3));
            }
        }
        for (&s, local) in &c.sigma {
            v.push((ModelEvent::at(s, EpochInc { h: local.epoch + 1 }), 1));
            if let Some(p) = c.history.get(&(local.epoch + 1)) {
                v.push((ModelEvent::at(s, SbcSetDeliver { h: local.epoch + 1, propset: p.clone() }), 3));
            }
        }

        let next = c.history.keys().next_back().map_or(1, |h| h + 1);
        let union: ElemSet = c.delta.proposals(next).into_iter().flatten().copied().collect();
        if !union.is_empty() || !c.delta.proposals(next).is_empty() {
            let propset = if rng.gen_bool(0.5) { union } else { havoc_subset(&union, rng) };
            v.push((ModelEvent::consensus(next, propset), 2));
        }

        let top = c.history.keys().next_back().copied().unwrap_or(0).max(c.sigma.values().map(|l| l.epoch).max().unwrap_or(0));
        for &b in &self.byzantine {
            let mut pool = c.knowledge.clone();
            for _ in 0..generate_invalid_count(rng) {
                pool.insert(new_elem(false));
            }
            let pool: Vec<Elem> = pool.into_iter().collect();
            if let Some(e) = pool.choose(rng) {
                v.push((ModelEvent::at(b, BrbBroadcast { x: BrbPayload::Add(*e) }), 1));
            }
            v.push((ModelEvent::at(b, BrbBroadcast { x: BrbPayload::EpochInc(rng.gen_range(0..=top + 2)) }), 1));
            let prop: ElemSet = pool.iter().filter(|_| rng.gen_bool(0.5)).copied().collect();
            v.push((ModelEvent::at(b, SbcPropose { h: rng.gen_range(1..=top + 2), prop }), 1));
            v.push((ModelEvent::at(b, EpochInc { h: rng.gen_range(0..=top + 2) }), 1));
            if let Some((&h, p)) = c.history.iter().nth(rng.gen_range(0..c.history.len().max(1))) {
                v.push((ModelEvent::at(b, SbcSetDeliver { h, propset: p.clone() }), 1));
            }
        }
        v.retain(|(ev, _)| self.enabled(ev, c));
        v
    }
}

fn havoc_subset<R: Rng>(s: &ElemSet, rng: &mut R) -> ElemSet {
    s.iter().filter(|_| rng.gen_bool(0.5)).copied().collect()
}

/// Geometric with p = 1/2, capped at 4.
fn generate_invalid_count<R: Rng>(rng: &mut R) -> usize {
    let mut k = 0;
    while k < 4 && rng.gen_bool(0.5) {
        k += 1;
    }
    k
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepError {
    pub step: usize,
    pub event: ModelEvent,
}

/// Valid elements of everything `b` has received are in its knowledge.
pub fn receive_within_knowledge(c: &GammaPrimeConfig) -> bool {
    c.delta
        .procs
        .get(&MODEL_B)
        .is_none_or(|ch| ch.received.iter().all(|m| m.valid_elements().is_subset(&c.knowledge)))
}

/// Observational equivalence. Byzantine ids are read off each config as the
/// processes in the network that have no correct-server state.
pub fn obs_equiv(phi: &GammaConfig, phi_prime: &GammaPrimeConfig) -> bool {
    obs_equiv_reason(phi, phi_prime).is_ok()
}

pub fn obs_equiv_reason(phi: &GammaConfig, phi_prime: &GammaPrimeConfig) -> Result<(), String> {
    if phi.sigma != phi_prime.sigma {
        let who = phi.sigma.iter().find(|(p, l)| phi_prime.sigma.get(p) != Some(l)).map(|(p, _)| *p);
        return Err(format!("local state differs at {who:?}"));
    }
    if phi.history != phi_prime.history {
        return Err("consensus histories differ".into());
    }
    if phi.knowledge != phi_prime.knowledge {
        return Err("byzantine knowledge differs".into());
    }
    for p in phi.sigma.keys() {
        if phi.delta.procs.get(p) != phi_prime.delta.procs.get(p) {
            return Err(format!("network of correct {p} differs"));
        }
    }
    let byz = phi.byzantine();
    let bs = phi_prime.byzantine();
    let [b] = bs.as_slice() else { return Err(format!("expected one stand-in process, found {}", bs.len())) };
    let bch = &phi_prime.delta.procs[b];
    let b_recv = multiset(&bch.received);

    let mut sent = Multiset::new();
    let mut recv_union = Multiset::new();
    for s in &byz {
        let ch = &phi.delta.procs[s];
        sent = ms_add(&sent, &multiset(&ch.sent));
        recv_union = ms_add(&recv_union, &multiset(&ch.received));
    }
    if sent != multiset(&bch.sent) {
        return Err("byzantine sent messages differ from b's".into());
    }
    if !ms_subset(&b_recv, &recv_union) {
        return Err("b received something no byzantine server received".into());
    }
    let b_total = ms_add(&b_recv, &bch.pending);
    for s in &byz {
        let ch = &phi.delta.procs[s];
        let recv = multiset(&ch.received);
        if !ms_subset(&bch.pending, &ch.pending) {
            return Err(format!("b has pending messages {s} does not"));
        }
        if ms_add(&recv, &ch.pending) != b_total {
            return Err(format!("messages addressed to {s} differ from those addressed to b"));
        }
        if !ms_subset(&recv, &b_recv) {
            return Err(format!("{s} received something b did not"));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Many adversaries to one.
    Forward,
    /// One adversary to many, with stuttering.
    Backward,
}

/// Everything needed to reproduce a failed mapping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Counterexample {
    pub direction: Direction,
    pub model: Model,
    pub seed: Option<u64>,
    pub source: Vec<ModelEvent>,
    pub mapped: Vec<ModelEvent>,
    /// Index into `mapped` of the first configuration that failed.
    pub step: usize,
    pub reason: String,
    pub source_config: Option<Config>,
    pub mapped_config: Option<Config>,
}

impl Counterexample {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Counterexample, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Re-run the mapping on the recorded source trace.
    pub fn replay(&self) -> Result<Vec<ModelEvent>, Box<Counterexample>> {
        let r = match self.direction {
            Direction::Forward => map_gamma_to_gamma_prime(&self.model, &self.source),
            Direction::Backward => map_gamma_prime_to_gamma(&self.model, &self.source),
        };
        r.map_err(|mut c| {
            c.seed = self.seed;
            c
        })
    }
}

fn cex(
    direction: Direction,
    model: &Model,
    source: &[ModelEvent],
    mapped: &[ModelEvent],
    step: usize,
    reason: String,
    configs: (Option<&Config>, Option<&Config>),
) -> Box<Counterexample> {
    Box::new(Counterexample {
        direction,
        model: model.clone(),
        seed: None,
        source: source.to_vec(),
        mapped: mapped.to_vec(),
        step,
        reason,
        source_config: configs.0.cloned(),
        mapped_config: configs.1.cloned(),
    })
}

/// Map a trace of the many-adversary model to one of the single-adversary
/// model. Correct-server and consensus events are copied; Byzantine events
/// move to `b`, and a reception `b` has already made becomes a nop.
pub fn map_gamma_to_gamma_prime(gamma: &Model, trace: &[ModelEvent]) -> Result<Vec<ModelEvent>, Box<Counterexample>> {
    let dir = Direction::Forward;
    let prime = gamma.prime();
    let mut phi = gamma.initial();
    let mut psi = prime.initial();
    let mut out = Vec::with_capacity(trace.len());
    for (i, ev) in trace.iter().enumerate() {
        if !ev.is_well_formed() || !gamma.enabled(ev, &phi) {
            return Err(cex(dir, gamma, trace, &out, i, format!("source event {i} not enabled"), (Some(&phi), Some(&psi))));
        }
        phi = gamma.effect(ev, &phi);
        let mapped = match ev.server {
            Some(s) if gamma.is_byzantine(s) => {
                let e = ev.retarget(MODEL_B);
                if prime.enabled(&e, &psi) {
                    e
                } else {
                    ModelEvent::nop()
                }
            }
            _ => ev.clone(),
        };
        if !prime.enabled(&mapped, &psi) {
            out.push(mapped);
            return Err(cex(dir, gamma, trace, &out, i, format!("mapped event {i} not enabled"), (Some(&phi), Some(&psi))));
        }
        psi = prime.effect(&mapped, &psi);
        out.push(mapped);
        if let Err(r) = obs_equiv_reason(&phi, &psi) {
            return Err(cex(dir, gamma, trace, &out, i + 1, r, (Some(&phi), Some(&psi))));
        }
        if !receive_within_knowledge(&psi) {
            return Err(cex(dir, gamma, trace, &out, i + 1, "b received elements it does not know".into(), (Some(&phi), Some(&psi))));
        }
    }
    Ok(out)
}

/// Map a trace of the single-adversary model to the many-adversary model.
/// The result starts with f-1 nops and replaces each event by a block of f:
/// receptions at `b` are replayed at every Byzantine server, other `b` events
/// run at the first Byzantine server, and the rest of each block is nops.
/// Configuration `t` of the result is equivalent to configuration `t / f` of the source.
pub fn map_gamma_prime_to_gamma(gamma: &Model, trace: &[ModelEvent]) -> Result<Vec<ModelEvent>, Box<Counterexample>> {
    let dir = Direction::Backward;
    let f = gamma.f().max(1);
    let prime = gamma.prime();
    let mut phi = gamma.initial();
    let mut psi = prime.initial();
    let mut out = vec![ModelEvent::nop(); f - 1];
    for (i, ev) in trace.iter().enumerate() {
        if !ev.is_well_formed() || !prime.enabled(ev, &psi) {
            return Err(cex(dir, gamma, trace, &out, out.len(), format!("source event {i} not enabled"), (Some(&psi), Some(&phi))));
        }
        psi = prime.effect(ev, &psi);
        let block: Vec<ModelEvent> = match ev.server {
            Some(MODEL_B) if ev.is_reception() => gamma.byzantine.iter().map(|&b| ev.retarget(b)).collect(),
            Some(MODEL_B) => {
                let first = gamma.byzantine.first().copied().unwrap_or(MODEL_B);
                std::iter::once(ev.retarget(first)).chain(std::iter::repeat_n(ModelEvent::nop(), f - 1)).collect()
            }
            _ => std::iter::once(ev.clone()).chain(std::iter::repeat_n(ModelEvent::nop(), f - 1)).collect(),
        };
        for e in block {
            if !gamma.enabled(&e, &phi) {
                out.push(e);
                return Err(cex(dir, gamma, trace, &out, out.len(), format!("replay of event {i} not enabled"), (Some(&psi), Some(&phi))));
            }
            phi = gamma.effect(&e, &phi);
            out.push(e);
            if let Err(r) = obs_equiv_reason(&phi, &psi) {
                return Err(cex(dir, gamma, trace, &out, out.len(), r, (Some(&psi), Some(&phi))));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedReport {
    pub n: u32,
    pub f: usize,
    pub seed: u64,
    pub forward_events: usize,
    pub forward_nops: usize,
    pub backward_events: usize,
    pub byzantine_steps: usize,
    /// Single-adversary configurations where `b`'s receptions were checked against its knowledge.
    pub knowledge_checks: usize,
}

/// Generate a trace in each model and map it to the other one.
pub fn check_seed(n: u32, f: usize, len: usize, seed: u64) -> Result<SeedReport, Box<Counterexample>> {
    let gamma = Model::gamma_seeded(n, f, seed);
    let tag = |mut c: Box<Counterexample>| {
        c.seed = Some(seed);
        c
    };
    let source = gamma.generate(len, seed);
    let fwd = map_gamma_to_gamma_prime(&gamma, &source).map_err(tag)?;
    let source_prime = gamma.prime().generate(len, seed.wrapping_add(1));
    let back = map_gamma_prime_to_gamma(&gamma, &source_prime).map_err(tag)?;
    let prime = gamma.prime();
    let mut knowledge_checks = 0;
    for (dir, src, trace) in [(Direction::Forward, &source, &fwd), (Direction::Backward, &source_prime, &source_prime)] {
        let configs = prime.replay(trace).map_err(|e| {
            tag(cex(dir, &gamma, src, trace, e.step, format!("mapped event {} not enabled", e.step), (None, None)))
        })?;
        if let Some(i) = configs.iter().position(|c| !receive_within_knowledge(c)) {
            let reason = format!("b received an element outside its knowledge at step {i}");
            return Err(tag(cex(dir, &gamma, src, trace, i, reason, (None, configs.get(i)))));
        }
        knowledge_checks += configs.len();
    }
    Ok(SeedReport {
        n,
        f,
        seed,
        forward_events: fwd.len(),
        forward_nops: fwd.iter().zip(&source).filter(|(m, s)| m.tag == EventTag::Nop && s.tag != EventTag::Nop).count(),
        backward_events: back.len(),
        byzantine_steps: source.iter().filter(|e| e.server.is_some_and(|s| gamma.is_byzantine(s))).count(),
        knowledge_checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn el(id: u32) -> Elem {
        Elem { id, valid: true }
    }

    fn bad(id: u32) -> Elem {
        Elem { id, valid: false }
    }

    fn p(i: u32) -> ProcessId {
        ProcessId(i)
    }

    fn n4() -> Model {
        Model::gamma(4, vec![p(3)])
    }

    #[test]
    fn nop_and_get_always_enabled() {
        let m = n4();
        let c = m.initial();
        assert!(m.enabled(&ModelEvent::nop(), &c));
        assert!(m.enabled(&ModelEvent::at(p(0), EventTag::Get), &c));
        assert_eq!(m.effect(&ModelEvent::nop(), &c), c);
    }

    #[test]
    fn events_need_a_server_except_nop_and_consensus() {
        assert!(ModelEvent::nop().is_well_formed());
        assert!(ModelEvent::consensus(1, ElemSet::new()).is_well_formed());
        assert!(!ModelEvent { tag: EventTag::Get, server: None }.is_well_formed());
        assert!(!ModelEvent { tag: EventTag::Nop, server: Some(p(0)) }.is_well_formed());
    }

    #[test]
    fn deliver_needs_pending() {
        let m = n4();
        let c = m.initial();
        let ev = ModelEvent::at(p(0), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) });
        assert!(!m.enabled(&ev, &c));
        let c = m.effect(&ModelEvent::at(p(1), EventTag::Add { e: el(1) }), &c);
        assert!(m.enabled(&ev, &c));
        let c2 = m.effect(&ev, &c);
        assert!(c2.sigma[&p(0)].set.contains(&el(1)));
        let msg = NetMsg::Brb(BrbPayload::Add(el(1)));
        assert_eq!(c2.delta.pending_count(p(0), &msg), 0);
        assert_eq!(c2.delta.procs[&p(0)].received, vec![msg.clone()]);
        // Everyone else still has it pending, the sender included.
        assert_eq!(c2.delta.pending_count(p(1), &msg), 1);
        assert_eq!(c2.delta.procs[&p(1)].sent, vec![msg]);
    }

    #[test]
    fn add_rules() {
        let m = n4();
        let c = m.initial();
        assert!(!m.enabled(&ModelEvent::at(p(0), EventTag::Add { e: bad(1) }), &c));
        let c = m.effect(&ModelEvent::at(p(0), EventTag::Add { e: el(1) }), &c);
        let c = m.effect(&ModelEvent::at(p(0), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) }), &c);
        assert!(!m.enabled(&ModelEvent::at(p(0), EventTag::Add { e: el(1) }), &c));
        assert!(m.enabled(&ModelEvent::at(p(3), EventTag::Add { e: el(1) }), &c));
        // A Byzantine add is only learned, not broadcast.
        let c2 = m.effect(&ModelEvent::at(p(3), EventTag::Add { e: el(7) }), &c);
        assert!(c2.knowledge.contains(&el(7)));
        assert_eq!(c2.delta, c.delta);
    }

    #[test]
    fn byzantine_broadcast_needs_knowledge_or_invalid() {
        let m = n4();
        let c = m.initial();
        let bcast = |e| ModelEvent::at(p(3), EventTag::BrbBroadcast { x: BrbPayload::Add(e) });
        assert!(!m.enabled(&bcast(el(1)), &c));
        assert!(m.enabled(&bcast(bad(1)), &c));
        assert!(!m.enabled(&ModelEvent::at(p(0), EventTag::BrbBroadcast { x: BrbPayload::Add(bad(1)) }), &c));
        let c = m.effect(&ModelEvent::at(p(3), EventTag::Add { e: el(1) }), &c);
        assert!(m.enabled(&bcast(el(1)), &c));
        let c = m.effect(&bcast(bad(2)), &c);
        // Invalid elements are never delivered.
        assert!(!m.enabled(&ModelEvent::at(p(0), EventTag::BrbDeliver { x: BrbPayload::Add(bad(2)) }), &c));
    }

    #[test]
    fn inform_at_byzantine_grows_knowledge_only() {
        let m = n4();
        let c = m.initial();
        let c = m.effect(&ModelEvent::at(p(0), EventTag::Add { e: el(1) }), &c);
        let c = m.effect(&ModelEvent::at(p(0), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) }), &c);
        let c = m.effect(&ModelEvent::at(p(1), EventTag::EpochInc { h: 1 }), &c);
        let c = m.effect(&ModelEvent::at(p(0), EventTag::BrbDeliver { x: BrbPayload::EpochInc(1) }), &c);
        let prop: ElemSet = [el(1)].into();
        assert_eq!(c.delta.proposals(1), vec![&prop]);
        // Already proposed, so a second copy of the epoch increment is held back.
        let c = m.effect(&ModelEvent::at(p(2), EventTag::EpochInc { h: 1 }), &c);
        assert!(!m.enabled(&ModelEvent::at(p(0), EventTag::BrbDeliver { x: BrbPayload::EpochInc(1) }), &c));
        let inform = ModelEvent::at(p(3), EventTag::SbcInform { h: 1, prop: prop.clone() });
        let c2 = m.effect(&inform, &c);
        assert_eq!(c2.knowledge, prop);
        assert_eq!(c2.sigma, c.sigma);
    }

    #[test]
    fn consensus_and_set_deliver() {
        let m = n4();
        let c = m.initial();
        assert!(!m.enabled(&ModelEvent::consensus(1, ElemSet::new()), &c));
        let c = m.effect(&ModelEvent::at(p(3), EventTag::SbcPropose { h: 1, prop: [bad(5)].into() }), &c);
        assert!(m.enabled(&ModelEvent::consensus(1, [bad(5)].into()), &c));
        assert!(!m.enabled(&ModelEvent::consensus(1, [el(5)].into()), &c));
        assert!(!m.enabled(&ModelEvent::consensus(2, ElemSet::new()), &c));
        let c = m.effect(&ModelEvent::consensus(1, [bad(5)].into()), &c);
        assert!(!m.enabled(&ModelEvent::consensus(1, ElemSet::new()), &c));
        let sd = ModelEvent::at(p(0), EventTag::SbcSetDeliver { h: 1, propset: [bad(5)].into() });
        assert!(m.enabled(&sd, &c));
        let c = m.effect(&sd, &c);
        assert_eq!(c.sigma[&p(0)].epoch, 1);
        assert!(c.sigma[&p(0)].history[&1].is_empty());
        assert!(!m.enabled(&sd, &c));
        // Byzantine servers may deliver any decided instance at any time.
        assert!(m.enabled(&sd.retarget(p(3)), &c));
    }

    #[test]
    fn equivalence_basics() {
        let m = n4();
        let prime = m.prime();
        assert!(obs_equiv(&m.initial(), &prime.initial()));
        let mut other = prime.initial();
        other.sigma.get_mut(&p(0)).unwrap().epoch = 1;
        assert!(!obs_equiv(&m.initial(), &other));
        let mut k = prime.initial();
        k.knowledge.insert(el(1));
        assert!(!obs_equiv(&m.initial(), &k));
    }

    #[test]
    fn correct_only_trace_maps_to_itself() {
        let m = n4();
        let t = vec![
            ModelEvent::at(p(0), EventTag::Add { e: el(1) }),
            ModelEvent::at(p(1), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) }),
            ModelEvent::at(p(1), EventTag::EpochInc { h: 1 }),
            ModelEvent::at(p(1), EventTag::BrbDeliver { x: BrbPayload::EpochInc(1) }),
            ModelEvent::consensus(1, [el(1)].into()),
            ModelEvent::at(p(1), EventTag::SbcSetDeliver { h: 1, propset: [el(1)].into() }),
        ];
        assert_eq!(map_gamma_to_gamma_prime(&m, &t).unwrap(), t);
        // With f = 1 the stutter is the identity.
        assert_eq!(map_gamma_prime_to_gamma(&m, &t).unwrap(), t);
    }

    #[test]
    fn byzantine_add_then_broadcast_moves_to_b() {
        let m = n4();
        let t = vec![
            ModelEvent::at(p(3), EventTag::Add { e: el(1) }),
            ModelEvent::at(p(3), EventTag::BrbBroadcast { x: BrbPayload::Add(el(1)) }),
            ModelEvent::at(p(0), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) }),
        ];
        let mapped = map_gamma_to_gamma_prime(&m, &t).unwrap();
        assert_eq!(mapped[0], t[0].retarget(MODEL_B));
        assert_eq!(mapped[1], t[1].retarget(MODEL_B));
        assert_eq!(mapped[2], t[2]);
    }

    #[test]
    fn second_byzantine_reception_becomes_nop() {
        let m = Model::gamma(7, vec![p(5), p(6)]);
        let deliver = |s| ModelEvent::at(p(s), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) });
        let t = vec![ModelEvent::at(p(0), EventTag::Add { e: el(1) }), deliver(5), deliver(6)];
        let mapped = map_gamma_to_gamma_prime(&m, &t).unwrap();
        assert_eq!(mapped[1], deliver(5).retarget(MODEL_B));
        assert_eq!(mapped[2], ModelEvent::nop());
    }

    #[test]
    fn b_reception_replays_at_every_byzantine_server() {
        let m = Model::gamma(7, vec![p(5), p(6)]);
        let t = vec![
            ModelEvent::at(p(0), EventTag::Add { e: el(1) }),
            ModelEvent::at(MODEL_B, EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) }),
            ModelEvent::nop(),
        ];
        let back = map_gamma_prime_to_gamma(&m, &t).unwrap();
        assert_eq!(back.len(), 1 + 2 * 3);
        assert_eq!(back[0], ModelEvent::nop());
        assert_eq!(back[1], t[0]);
        assert_eq!(back[2], ModelEvent::nop());
        assert_eq!(back[3], t[1].retarget(p(5)));
        assert_eq!(back[4], t[1].retarget(p(6)));
        assert_eq!(&back[5..], &[ModelEvent::nop(), ModelEvent::nop()]);
    }

    #[test]
    fn hand_checked_five_event_trace() {
        let m = n4();
        let prime = m.prime();
        let t = vec![
            ModelEvent::at(p(0), EventTag::Add { e: el(1) }),
            ModelEvent::at(p(3), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) }),
            ModelEvent::at(p(3), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) }),
            ModelEvent::at(p(3), EventTag::SbcPropose { h: 1, prop: [el(1), bad(9)].into() }),
            ModelEvent::consensus(1, [bad(9)].into()),
        ];
        // The second delivery is not enabled: only one copy was ever pending.
        assert!(m.replay(&t).is_err());
        let t: Vec<_> = t.into_iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, e)| e).collect();
        let gs = m.replay(&t).unwrap();
        let mapped = map_gamma_to_gamma_prime(&m, &t).unwrap();
        let ps = prime.replay(&mapped).unwrap();
        for (g, q) in gs.iter().zip(&ps) {
            assert!(obs_equiv(g, q));
        }
        let last = ps.last().unwrap();
        assert_eq!(last.knowledge, [el(1)].into());
        assert_eq!(last.delta.procs[&MODEL_B].sent.len(), 1);
        assert_eq!(last.history[&1], [bad(9)].into());
        // Breaking the network of the stand-in breaks equivalence.
        let mut broken = last.clone();
        broken.delta.procs.get_mut(&MODEL_B).unwrap().received.clear();
        assert!(!obs_equiv(gs.last().unwrap(), &broken));
    }

    #[test]
    fn generated_traces_are_valid_and_map_both_ways() {
        for seed in 0..5 {
            for (n, f) in [(4, 1), (7, 2)] {
                let r = check_seed(n, f, 120, seed).map_err(|c| c.reason).unwrap();
                assert_eq!(r.backward_events, f - 1 + 120 * f);
                let m = Model::gamma_seeded(n, f, seed);
                assert!(m.replay(&m.generate(120, seed)).is_ok());
            }
        }
    }

    #[test]
    fn counterexample_round_trips() {
        let m = n4();
        let bogus = vec![ModelEvent::at(p(0), EventTag::BrbDeliver { x: BrbPayload::Add(el(1)) })];
        let c = map_gamma_to_gamma_prime(&m, &bogus).unwrap_err();
        assert_eq!(c.step, 0);
        let back = Counterexample::from_json(&c.to_json()).unwrap();
        assert_eq!(back.source, bogus);
        assert!(back.replay().is_err());
    }
}
