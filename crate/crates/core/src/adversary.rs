//! Byzantine servers for the simulated cluster.
//!
//! `Havoc` follows the nondeterministic process of the Byzantine model: it keeps a
//! knowledge set of valid elements it has seen, answers `get()` with arbitrary views
//! built from that knowledge plus invalid elements, and at random ticks broadcasts,
//! proposes, echoes or readies on its own. `ForgedDigest` and `LyingHistory` run the
//! correct protocol internally (so the cluster stays live) but misbehave towards clients.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brb::{BrbFrame, Phase};
use crate::msg::{Msg, Outbox, SetchainPayload, Timer};
use crate::server::{Server, ServerConfig};
use crate::simnet::SimTime;
use crate::types::{
    hash_epoch, Digest, Element, ElementSet, EpochNumber, GetResult, History, KeyPair, Keyring, ProcessId,
    SignedEpochHash,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryKind {
    #[default]
    None,
    Silent,
    Havoc,
    ForgedDigest,
    LyingHistory,
}

impl AdversaryKind {
    pub fn name(self) -> &'static str {
        match self {
            AdversaryKind::None => "none",
            AdversaryKind::Silent => "silent",
            AdversaryKind::Havoc => "havoc",
            AdversaryKind::ForgedDigest => "forged-digest",
            AdversaryKind::LyingHistory => "lying-history",
        }
    }
}

/// Gap between spontaneous actions of a havoc process, in ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HavocConfig {
    pub min_gap: u64,
    pub max_gap: u64,
}

impl Default for HavocConfig {
    fn default() -> Self {
        HavocConfig { min_gap: 20, max_gap: 200 }
    }
}

/// State shared by all Byzantine servers of a run: they collude.
#[derive(Clone, Debug, Default)]
pub struct Coalition {
    pub knowledge: ElementSet,
    pub keys: Vec<KeyPair>,
}

impl Coalition {
    pub fn learn<'a>(&mut self, elements: impl IntoIterator<Item = &'a Element>, keyring: &Keyring) {
        for e in elements {
            if !self.knowledge.contains(e) && e.is_valid(keyring) {
                self.knowledge.insert(e.clone());
            }
        }
    }
}

/// Invalid elements, geometric(1/2) many, at most 4.
pub fn generate_invalid_elems<R: Rng + ?Sized>(author: ProcessId, rng: &mut R) -> Vec<Element> {
    let mut v = Vec::new();
    while v.len() < 4 && rng.gen_bool(0.5) {
        v.push(Element::random_invalid(author, rng));
    }
    v
}

/// Independent fair coin per element.
pub fn havoc_subset<R: Rng + ?Sized>(pool: &ElementSet, rng: &mut R) -> ElementSet {
    pool.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect()
}

/// Random epoch count, then each element thrown into a uniformly chosen epoch.
pub fn havoc_partition<R: Rng + ?Sized>(pool: &ElementSet, max_epochs: u64, rng: &mut R) -> History {
    let k = rng.gen_range(0..=max_epochs) as usize;
    let mut bins = vec![ElementSet::new(); k];
    if k > 0 {
        for e in pool {
            bins[rng.gen_range(0..k)].insert(e.clone());
        }
    }
    let mut h = History::new();
    for b in bins {
        h.push(b);
    }
    h
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ByzStats {
    pub brb_inits: u64,
    pub proposals: u64,
    pub gets_answered: u64,
    pub forged_signatures: u64,
    pub adds_dropped: u64,
}

#[derive(Clone, Debug)]
pub struct ByzServer {
    id: ProcessId,
    kind: AdversaryKind,
    keys: KeyPair,
    keyring: Arc<Keyring>,
    servers: Vec<ProcessId>,
    sbc: ProcessId,
    havoc: HavocConfig,
    inner: Option<Server>,
    rng: ChaCha8Rng,
    seen: VecDeque<(ProcessId, Digest)>,
    decided: EpochNumber,
    active: bool,
    stats: ByzStats,
}

const SEEN_CAP: usize = 64;

impl ByzServer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: AdversaryKind,
        cfg: ServerConfig,
        keys: KeyPair,
        keyring: Arc<Keyring>,
        servers: Vec<ProcessId>,
        sbc: ProcessId,
        havoc: HavocConfig,
        seed: u64,
    ) -> ByzServer {
        let inner = matches!(kind, AdversaryKind::ForgedDigest | AdversaryKind::LyingHistory).then(|| {
            let cfg = ServerConfig { sign_epochs: false, ..cfg };
            Server::new(cfg, keys.clone(), keyring.clone(), servers.clone(), sbc)
        });
        ByzServer {
            id: keys.id(),
            kind,
            keys,
            keyring,
            servers,
            sbc,
            havoc,
            inner,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seen: VecDeque::new(),
            decided: EpochNumber::ZERO,
            active: false,
            stats: ByzStats::default(),
        }
    }

    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn kind(&self) -> AdversaryKind {
        self.kind
    }

    pub fn stats(&self) -> &ByzStats {
        &self.stats
    }

    /// The protocol-following core of the forged-digest and lying-history variants.
    pub fn inner(&self) -> Option<&Server> {
        self.inner.as_ref()
    }

    /// Enables spontaneous actions (havoc only).
    pub fn start(&mut self, now: SimTime, out: &mut Outbox) {
        if self.kind == AdversaryKind::Havoc {
            self.active = true;
            self.arm(now, out);
        }
    }

    pub fn stop(&mut self) {
        self.active = false;
    }

    fn arm(&mut self, now: SimTime, out: &mut Outbox) {
        let gap = self.rng.gen_range(self.havoc.min_gap..=self.havoc.max_gap.max(self.havoc.min_gap));
        out.timer(now + gap, Timer::Adversary);
    }

    pub fn handle(&mut self, from: ProcessId, msg: Msg, now: SimTime, coalition: &mut Coalition, out: &mut Outbox) {
        if self.kind == AdversaryKind::Silent || self.kind == AdversaryKind::None {
            return;
        }
        self.learn(&msg, coalition);
        if self.kind == AdversaryKind::Havoc {
            self.handle_havoc(from, msg, now, coalition, out);
        } else {
            self.handle_wrapped(from, msg, now, coalition, out);
        }
    }

    fn learn(&mut self, msg: &Msg, coalition: &mut Coalition) {
        let ring = self.keyring.clone();
        match msg {
            Msg::AddRequest(e) => coalition.learn([e], &ring),
            Msg::Brb(frame) => {
                if let Some(p) = &frame.payload {
                    if let Ok(payload) = SetchainPayload::decode(p) {
                        coalition.learn(payload.elements(), &ring);
                    }
                }
                if !self.seen.contains(&(frame.origin, frame.digest)) {
                    if self.seen.len() == SEEN_CAP {
                        self.seen.pop_front();
                    }
                    self.seen.push_back((frame.origin, frame.digest));
                }
            }
            Msg::Inform { prop, .. } => coalition.learn(prop.iter(), &ring),
            Msg::SetDeliver { h, propset } => {
                coalition.learn(propset.values().flatten(), &ring);
                self.decided = self.decided.max(*h);
            }
            _ => {}
        }
    }

    fn random_servers(&mut self, p: f64) -> Vec<ProcessId> {
        let mut v: Vec<ProcessId> = self.servers.iter().copied().filter(|_| self.rng.gen_bool(p)).collect();
        if v.is_empty() {
            v.push(*self.servers.choose(&mut self.rng).unwrap());
        }
        v
    }

    fn junk(&mut self, coalition: &Coalition, p: f64) -> ElementSet {
        let mut s: ElementSet = coalition.knowledge.iter().filter(|_| self.rng.gen_bool(p)).cloned().collect();
        s.extend(generate_invalid_elems(self.id, &mut self.rng));
        s
    }

    fn havoc_view(&mut self, coalition: &Coalition) -> GetResult {
        let mut pool = coalition.knowledge.clone();
        pool.extend(generate_invalid_elems(self.id, &mut self.rng));
        let theset = havoc_subset(&pool, &mut self.rng);
        let stamped = havoc_subset(&theset, &mut self.rng);
        let history = havoc_partition(&stamped, 3, &mut self.rng);
        let epoch = EpochNumber(self.rng.gen_range(0..=history.last_epoch().0 + 1));
        GetResult { theset, history, epoch }
    }

    fn handle_havoc(&mut self, from: ProcessId, msg: Msg, now: SimTime, coalition: &mut Coalition, out: &mut Outbox) {
        match msg {
            Msg::GetRequest { id } => {
                self.stats.gets_answered += 1;
                let view = self.havoc_view(coalition);
                out.send(from, Msg::GetReply { id, result: Arc::new(view) });
            }
            Msg::Timer(Timer::Adversary) if self.active => {
                self.do_stuff(coalition, out);
                self.arm(now, out);
            }
            _ => {}
        }
    }

    fn send_init(&mut self, payload: SetchainPayload, out: &mut Outbox) {
        let bytes = payload.encode();
        let frame = BrbFrame { phase: Phase::Init, origin: self.id, digest: Digest::of(&bytes), payload: Some(bytes) };
        for to in self.random_servers(0.7) {
            out.send(to, Msg::Brb(frame.clone()));
        }
        self.stats.brb_inits += 1;
    }

    fn do_stuff(&mut self, coalition: &Coalition, out: &mut Outbox) {
        match self.rng.gen_range(0..4) {
            0 => {
                let batch: Vec<Element> = self.junk(coalition, 0.3).into_iter().collect();
                let payload = match batch.as_slice() {
                    [e] => SetchainPayload::Add(e.clone()),
                    _ => SetchainPayload::AddBatch(batch),
                };
                self.send_init(payload, out);
            }
            1 => {
                let h = EpochNumber(self.decided.0 + self.rng.gen_range(1..=2));
                self.send_init(SetchainPayload::EpochInc(h), out);
            }
            2 => {
                let h = EpochNumber(self.decided.0 + self.rng.gen_range(1..=2));
                let prop = Arc::new(self.junk(coalition, 0.5));
                out.send(self.sbc, Msg::Propose { h, prop });
                self.stats.proposals += 1;
            }
            _ => {
                let Some(&(origin, digest)) = self.seen.iter().collect::<Vec<_>>().choose(&mut self.rng).copied() else {
                    return;
                };
                let phase = if self.rng.gen_bool(0.5) { Phase::Echo } else { Phase::Ready };
                let frame = BrbFrame { phase, origin, digest, payload: None };
                for to in self.random_servers(0.5) {
                    out.send(to, Msg::Brb(frame.clone()));
                }
            }
        }
    }

    fn handle_wrapped(&mut self, from: ProcessId, msg: Msg, now: SimTime, coalition: &mut Coalition, out: &mut Outbox) {
        let lying = self.kind == AdversaryKind::LyingHistory;
        let inner = self.inner.as_mut().expect("wrapped adversary has a server");
        match msg {
            Msg::Brb(frame) => inner.on_brb_frame(from, frame, out),
            Msg::SetDeliver { h, propset } if from == self.sbc => {
                let before = inner.epoch();
                inner.on_set_deliver(h, propset, now, out);
                if self.kind == AdversaryKind::ForgedDigest {
                    let after = self.inner.as_ref().unwrap().epoch();
                    for k in before.0 + 1..=after.0 {
                        self.forge(EpochNumber(k), now, out);
                    }
                }
            }
            Msg::AddRequest(e) if lying => {
                let _ = e;
                self.stats.adds_dropped += 1;
            }
            Msg::AddRequest(e) => {
                let _ = inner.add(e, now, out);
            }
            Msg::EpochIncRequest(h) => {
                let _ = inner.epoch_inc(h, out);
            }
            Msg::GetRequest { id } => {
                self.stats.gets_answered += 1;
                let view = if lying { lying_view(coalition) } else { inner.get() };
                out.send(from, Msg::GetReply { id, result: Arc::new(view) });
            }
            Msg::Timer(Timer::AggFlush) => inner.on_flush_timer(now, out),
            _ => {}
        }
    }

    /// Signs a digest that no correct server computes for epoch `h`.
    fn forge(&mut self, h: EpochNumber, now: SimTime, out: &mut Outbox) {
        let inner = self.inner.as_mut().unwrap();
        let set = inner.history().get(h).expect("stamped");
        if set.iter().all(|e| SignedEpochHash::from_element(e).is_some()) {
            return;
        }
        let digest = forged_digest(h, &hash_epoch(set));
        let seh = SignedEpochHash::sign(&self.keys, h, digest);
        if inner.add(seh.to_element(), now, out).is_ok() {
            self.stats.forged_signatures += 1;
        }
    }
}

/// The digest every forged-digest member signs for an epoch whose real digest is `real`.
pub fn forged_digest(h: EpochNumber, real: &Digest) -> Digest {
    let mut v = b"forged".to_vec();
    v.extend_from_slice(&h.0.to_be_bytes());
    v.extend_from_slice(&real.0);
    Digest::of(&v)
}

/// A view placing every known client element in epoch 1, signed by the whole coalition.
pub fn lying_view(coalition: &Coalition) -> GetResult {
    let fake: ElementSet =
        coalition.knowledge.iter().filter(|e| SignedEpochHash::from_element(e).is_none()).cloned().collect();
    let digest = hash_epoch(&fake);
    let mut history = History::new();
    history.push(fake.clone());
    let mut theset = fake;
    for k in &coalition.keys {
        theset.insert(SignedEpochHash::sign(k, EpochNumber(1), digest).to_element());
    }
    GetResult { theset, history, epoch: EpochNumber(1) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::{AggConfig, Algorithm};
    use crate::types::SchemeKind;

    fn byz(kind: AdversaryKind) -> (ByzServer, Arc<Keyring>, KeyPair, Coalition) {
        let mut ring = Keyring::new(SchemeKind::Mac, 1);
        let keys: Vec<KeyPair> = (0..4).map(|i| ring.register(ProcessId(i))).collect();
        let client = ring.register(ProcessId(10));
        let ring = Arc::new(ring);
        let cfg = ServerConfig { f: 1, algorithm: Algorithm::Fast, agg: AggConfig::default(), sign_epochs: true };
        let b = ByzServer::new(
            kind,
            cfg,
            keys[3].clone(),
            ring.clone(),
            (0..4).map(ProcessId).collect(),
            ProcessId(99),
            HavocConfig::default(),
            7,
        );
        let coalition = Coalition { knowledge: ElementSet::new(), keys: vec![keys[3].clone()] };
        (b, ring, client, coalition)
    }

    fn payload_elements(out: &Outbox) -> Vec<Element> {
        let mut v = Vec::new();
        for (_, m) in &out.msgs {
            match m {
                Msg::Brb(f) => {
                    if let Some(p) = &f.payload {
                        v.extend(SetchainPayload::decode(p).unwrap().elements().iter().cloned());
                    }
                }
                Msg::Propose { prop, .. } => v.extend(prop.iter().cloned()),
                _ => {}
            }
        }
        v
    }

    #[test]
    fn havoc_without_knowledge_emits_only_invalid_elements() {
        let (mut b, ring, _, mut co) = byz(AdversaryKind::Havoc);
        let mut out = Outbox::default();
        b.start(SimTime(0), &mut out);
        for t in 1..300 {
            b.handle(ProcessId(3), Msg::Timer(Timer::Adversary), SimTime(t), &mut co, &mut out);
        }
        let elems = payload_elements(&out);
        assert!(!elems.is_empty());
        assert!(elems.iter().all(|e| !e.is_valid(&ring)));
    }

    #[test]
    fn havoc_reuses_informed_elements() {
        let (mut b, ring, client, mut co) = byz(AdversaryKind::Havoc);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Element::random(&client, &mut rng);
        let mut out = Outbox::default();
        b.start(SimTime(0), &mut out);
        let inform = Msg::Inform { h: EpochNumber(1), proposer: ProcessId(0), prop: Arc::new([a.clone()].into()) };
        b.handle(ProcessId(99), inform, SimTime(1), &mut co, &mut out);
        assert!(co.knowledge.contains(&a));
        for t in 2..400 {
            b.handle(ProcessId(3), Msg::Timer(Timer::Adversary), SimTime(t), &mut co, &mut out);
        }
        let proposed_a = out
            .msgs
            .iter()
            .any(|(_, m)| matches!(m, Msg::Propose { prop, .. } if prop.contains(&a)));
        assert!(proposed_a);
        assert!(payload_elements(&out).iter().filter(|e| e.is_valid(&ring)).all(|e| *e == a));
    }

    #[test]
    fn silent_never_sends() {
        let (mut b, _, _, mut co) = byz(AdversaryKind::Silent);
        let mut out = Outbox::default();
        b.start(SimTime(0), &mut out);
        b.handle(ProcessId(0), Msg::GetRequest { id: 1 }, SimTime(1), &mut co, &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn partition_uses_every_element_once() {
        let (_, _, client, _) = byz(AdversaryKind::Havoc);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool: ElementSet = (0..20).map(|_| Element::random(&client, &mut rng)).collect();
        for _ in 0..50 {
            let h = havoc_partition(&pool, 3, &mut rng);
            if h.is_empty() {
                continue;
            }
            assert_eq!(h.total_len(), pool.len());
            assert!(h.find_overlap().is_none());
        }
    }

    #[test]
    fn invalid_count_is_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let max = (0..2000).map(|_| generate_invalid_elems(ProcessId(1), &mut rng).len()).max().unwrap();
        assert_eq!(max, 4);
    }

    #[test]
    fn lying_view_is_self_consistent_but_undersigned() {
        let (_, ring, client, mut co) = byz(AdversaryKind::LyingHistory);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Element::random(&client, &mut rng);
        co.learn([&e], &ring);
        let v = lying_view(&co);
        let servers = (0..4).map(ProcessId).collect();
        assert_eq!(v.history.epoch_of(&e), Some(EpochNumber(1)));
        assert!(crate::client::check_confirmation(&e, &v, &ring, 1, &servers).is_none());
        assert!(crate::client::check_confirmation(&e, &v, &ring, 0, &servers).is_some());
    }
}
