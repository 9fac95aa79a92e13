//! Setchain server state machines.
//!
//! [`Server`] implements the BRB + set-consensus algorithm in its plain form and with
//! add aggregation, plus optional epoch signing. [`Central`] is the single-process
//! reference used as a test oracle.

mod central;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brb::{Brb, BrbFrame};
use crate::msg::{Msg, Outbox, SetchainPayload, Timer};
use crate::sbc::Propset;
use crate::simnet::SimTime;
use crate::types::{
    hash_epoch, Element, ElementSet, EpochNumber, GetResult, History, KeyPair, Keyring, ProcessId, SignedEpochHash,
    StateSnapshot,
};

pub use central::Central;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Fast,
    FastAgg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggConfig {
    pub max_batch: usize,
    pub max_wait: SimTime,
}

impl Default for AggConfig {
    fn default() -> Self {
        AggConfig { max_batch: 1000, max_wait: SimTime(5 * SimTime::TICKS_PER_SECOND) }
    }
}

impl AggConfig {
    /// The thresholds of the original deployment.
    pub fn production() -> Self {
        AggConfig { max_batch: 1_000_000, max_wait: SimTime(5 * SimTime::TICKS_PER_SECOND) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServerConfig {
    pub f: usize,
    pub algorithm: Algorithm,
    pub agg: AggConfig,
    pub sign_epochs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AddError {
    #[error("invalid-element")]
    InvalidElement,
    #[error("already-present")]
    AlreadyPresent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("stale-or-future-epoch: requested {requested}, current {current}")]
pub struct EpochIncError {
    pub requested: EpochNumber,
    pub current: EpochNumber,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ServerStats {
    pub brb_broadcasts: u64,
    pub batches_flushed: u64,
    pub proposals: u64,
    pub duplicate_epochinc_ignored: u64,
    pub buffered_epochinc: u64,
    pub brb_deliveries: u64,
}

#[derive(Clone, Debug)]
pub struct Server {
    id: ProcessId,
    cfg: ServerConfig,
    keys: KeyPair,
    keyring: Arc<Keyring>,
    sbc: ProcessId,
    theset: ElementSet,
    history: History,
    epoch: EpochNumber,
    stamped: HashMap<Element, EpochNumber>,
    unstamped: ElementSet,
    prop: BTreeMap<EpochNumber, Arc<ElementSet>>,
    tobroadcast: BTreeMap<Element, SimTime>,
    flush_armed: bool,
    pending_epochinc: BTreeSet<EpochNumber>,
    pending_setdeliver: BTreeMap<EpochNumber, Arc<Propset>>,
    brb: Brb,
    new_elements: Vec<Element>,
    stats: ServerStats,
}

impl Server {
    /// `servers` lists every server (correct or not), including this one; `sbc` is the
    /// set-consensus service.
    pub fn new(
        cfg: ServerConfig,
        keys: KeyPair,
        keyring: Arc<Keyring>,
        servers: Vec<ProcessId>,
        sbc: ProcessId,
    ) -> Server {
        let id = keys.id();
        Server {
            id,
            brb: Brb::new(id, cfg.f, servers),
            cfg,
            keys,
            keyring,
            sbc,
            theset: ElementSet::new(),
            history: History::new(),
            epoch: EpochNumber::ZERO,
            stamped: HashMap::new(),
            unstamped: ElementSet::new(),
            prop: BTreeMap::new(),
            tobroadcast: BTreeMap::new(),
            flush_armed: false,
            pending_epochinc: BTreeSet::new(),
            pending_setdeliver: BTreeMap::new(),
            new_elements: Vec::new(),
            stats: ServerStats::default(),
        }
    }

    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn get(&self) -> GetResult {
        GetResult { theset: self.theset.clone(), history: self.history.clone(), epoch: self.epoch }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot::of(&self.get())
    }

    pub fn theset(&self) -> &ElementSet {
        &self.theset
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn epoch(&self) -> EpochNumber {
        self.epoch
    }

    pub fn epoch_of(&self, e: &Element) -> Option<EpochNumber> {
        self.stamped.get(e).copied()
    }

    /// Elements in `theset` not yet stamped.
    pub fn unstamped(&self) -> &ElementSet {
        &self.unstamped
    }

    pub fn tobroadcast_len(&self) -> usize {
        self.tobroadcast.len()
    }

    pub fn prop(&self, h: EpochNumber) -> Option<&ElementSet> {
        self.prop.get(&h).map(|p| &**p)
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn brb(&self) -> &Brb {
        &self.brb
    }

    /// Elements inserted into `theset` since the last call.
    pub fn take_new_elements(&mut self) -> Vec<Element> {
        std::mem::take(&mut self.new_elements)
    }

    fn broadcast(&mut self, payload: SetchainPayload, out: &mut Outbox) {
        let mut frames = Vec::new();
        self.brb.broadcast(payload.encode(), &mut frames);
        if !frames.is_empty() {
            self.stats.brb_broadcasts += 1;
        }
        for (to, f) in frames {
            out.send(to, Msg::Brb(f));
        }
    }

    pub fn add(&mut self, e: Element, now: SimTime, out: &mut Outbox) -> Result<(), AddError> {
        if !e.is_valid(&self.keyring) {
            return Err(AddError::InvalidElement);
        }
        if self.theset.contains(&e) {
            return Err(AddError::AlreadyPresent);
        }
        match self.cfg.algorithm {
            Algorithm::Fast => self.broadcast(SetchainPayload::Add(e), out),
            Algorithm::FastAgg => {
                self.tobroadcast.entry(e).or_insert(now);
                if self.tobroadcast.len() > self.cfg.agg.max_batch {
                    self.flush(out);
                } else if !self.flush_armed {
                    self.flush_armed = true;
                    out.timer(now + self.cfg.agg.max_wait, Timer::AggFlush);
                }
            }
        }
        Ok(())
    }

    /// Broadcasts the whole aggregation buffer as one batch and clears it.
    pub fn flush(&mut self, out: &mut Outbox) {
        if self.tobroadcast.is_empty() {
            return;
        }
        let batch: Vec<Element> = std::mem::take(&mut self.tobroadcast).into_keys().collect();
        self.stats.batches_flushed += 1;
        self.broadcast(SetchainPayload::AddBatch(batch), out);
    }

    /// Aggregation timeout check.
    pub fn on_flush_timer(&mut self, now: SimTime, out: &mut Outbox) {
        self.flush_armed = false;
        let Some(oldest) = self.tobroadcast.values().min().copied() else { return };
        let wait = self.cfg.agg.max_wait;
        if now.saturating_sub(oldest) >= wait {
            self.flush(out);
        } else {
            self.flush_armed = true;
            out.timer(oldest + wait, Timer::AggFlush);
        }
    }

    pub fn epoch_inc(&mut self, h: EpochNumber, out: &mut Outbox) -> Result<(), EpochIncError> {
        if h != self.epoch.next() {
            return Err(EpochIncError { requested: h, current: self.epoch });
        }
        self.broadcast(SetchainPayload::EpochInc(h), out);
        Ok(())
    }

    pub fn on_brb_frame(&mut self, from: ProcessId, frame: BrbFrame, out: &mut Outbox) {
        let mut frames = Vec::new();
        let delivery = self.brb.handle(from, frame, &mut frames);
        for (to, f) in frames {
            out.send(to, Msg::Brb(f));
        }
        let Some(d) = delivery else { return };
        self.stats.brb_deliveries += 1;
        match SetchainPayload::decode(&d.payload) {
            Ok(SetchainPayload::Add(e)) => self.on_deliver_add(std::slice::from_ref(&e)),
            Ok(SetchainPayload::AddBatch(s)) => self.on_deliver_add(&s),
            Ok(SetchainPayload::EpochInc(h)) => self.on_deliver_epochinc(h, out),
            Err(_) => {}
        }
    }

    fn insert(&mut self, e: Element) {
        if self.theset.insert(e.clone()) {
            if !self.stamped.contains_key(&e) {
                self.unstamped.insert(e.clone());
            }
            self.new_elements.push(e);
        }
    }

    /// Merges delivered elements, validating each one individually.
    pub fn on_deliver_add(&mut self, elements: &[Element]) {
        for e in elements {
            if self.cfg.algorithm == Algorithm::FastAgg {
                self.tobroadcast.remove(e);
            }
            if !self.theset.contains(e) && e.is_valid(&self.keyring) {
                self.insert(e.clone());
            }
        }
    }

    pub fn on_deliver_epochinc(&mut self, h: EpochNumber, out: &mut Outbox) {
        let expected = self.epoch.next();
        if h < expected {
            return;
        }
        if h > expected {
            if self.pending_epochinc.insert(h) {
                self.stats.buffered_epochinc += 1;
            }
            return;
        }
        if self.prop.contains_key(&h) {
            self.stats.duplicate_epochinc_ignored += 1;
            return;
        }
        let mut prop = self.unstamped.clone();
        if self.cfg.algorithm == Algorithm::FastAgg {
            // Buffered elements ride along with the proposal and skip their broadcast
            // if they get stamped first.
            prop.extend(self.tobroadcast.keys().cloned());
        }
        let prop = Arc::new(prop);
        self.prop.insert(h, prop.clone());
        self.stats.proposals += 1;
        out.send(self.sbc, Msg::Propose { h, prop });
    }

    pub fn on_set_deliver(&mut self, h: EpochNumber, propset: Arc<Propset>, now: SimTime, out: &mut Outbox) {
        if h <= self.epoch {
            return;
        }
        if h > self.epoch.next() {
            self.pending_setdeliver.insert(h, propset);
            return;
        }
        self.apply(h, &propset, now, out);
        loop {
            let next = self.epoch.next();
            if let Some(ps) = self.pending_setdeliver.remove(&next) {
                self.apply(next, &ps, now, out);
                continue;
            }
            self.pending_epochinc = self.pending_epochinc.split_off(&next);
            if self.pending_epochinc.remove(&next) {
                self.on_deliver_epochinc(next, out);
            }
            break;
        }
    }

    fn apply(&mut self, h: EpochNumber, propset: &Propset, now: SimTime, out: &mut Outbox) {
        debug_assert_eq!(h, self.epoch.next());
        let mut stamp = ElementSet::new();
        for set in propset.values() {
            for e in set {
                if self.stamped.contains_key(e) || stamp.contains(e) {
                    continue;
                }
                if self.theset.contains(e) || e.is_valid(&self.keyring) {
                    stamp.insert(e.clone());
                }
            }
        }
        for e in &stamp {
            self.insert(e.clone());
            self.unstamped.remove(e);
            self.stamped.insert(e.clone(), h);
            self.tobroadcast.remove(e);
        }
        let pushed = self.history.push(stamp);
        debug_assert_eq!(pushed, h);
        self.epoch = h;
        if self.cfg.sign_epochs {
            self.sign_epoch(h, now, out);
        }
    }

    /// Epochs holding only signed hashes (or nothing) are not signed, otherwise every
    /// epoch would produce elements for the next one.
    fn sign_epoch(&mut self, h: EpochNumber, now: SimTime, out: &mut Outbox) {
        let set = self.history.get(h).expect("epoch just stamped");
        if set.iter().all(|e| SignedEpochHash::from_element(e).is_some()) {
            return;
        }
        let digest = hash_epoch(set);
        let seh = SignedEpochHash::sign(&self.keys, h, digest);
        let _ = self.add(seh.to_element(), now, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brb::Phase;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        ring: Arc<Keyring>,
        client: KeyPair,
        rng: ChaCha8Rng,
    }

    fn server(algorithm: Algorithm, agg: AggConfig, sign: bool) -> (Server, Fixture) {
        let mut ring = Keyring::new(crate::types::SchemeKind::Mac, 11);
        let keys = ring.register(ProcessId(0));
        for i in 1..4 {
            ring.register(ProcessId(i));
        }
        let client = ring.register(ProcessId(100));
        let ring = Arc::new(ring);
        let cfg = ServerConfig { f: 1, algorithm, agg, sign_epochs: sign };
        let s = Server::new(cfg, keys, ring.clone(), (0..4).map(ProcessId).collect(), ProcessId(99));
        (s, Fixture { ring, client, rng: ChaCha8Rng::seed_from_u64(5) })
    }

    impl Fixture {
        fn elem(&mut self) -> Element {
            Element::random(&self.client, &mut self.rng)
        }
    }

    fn propset(entries: &[(u32, &[&Element])]) -> Arc<Propset> {
        Arc::new(entries.iter().map(|(p, es)| (ProcessId(*p), es.iter().map(|e| (*e).clone()).collect())).collect())
    }

    fn brb_inits(out: &Outbox) -> Vec<SetchainPayload> {
        out.msgs
            .iter()
            .filter_map(|(to, m)| match m {
                Msg::Brb(f) if f.phase == Phase::Init && *to == ProcessId(0) => {
                    Some(SetchainPayload::decode(f.payload.as_ref().unwrap()).unwrap())
                }
                _ => None,
            })
            .collect()
    }

    fn proposals(out: &Outbox) -> Vec<(EpochNumber, ElementSet)> {
        out.msgs
            .iter()
            .filter_map(|(_, m)| match m {
                Msg::Propose { h, prop } => Some((*h, (**prop).clone())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn fresh_get_is_empty_and_pure() {
        let (s, _) = server(Algorithm::Fast, AggConfig::default(), false);
        let r = s.get();
        assert!(r.theset.is_empty() && r.history.is_empty());
        assert_eq!(r.epoch, EpochNumber(0));
        assert_eq!(s.get(), r);
    }

    #[test]
    fn add_validates_and_broadcasts() {
        let (mut s, mut fx) = server(Algorithm::Fast, AggConfig::default(), false);
        let e = fx.elem();
        let mut out = Outbox::default();
        s.add(e.clone(), SimTime(0), &mut out).unwrap();
        assert_eq!(brb_inits(&out), vec![SetchainPayload::Add(e.clone())]);
        assert_eq!(out.msgs.len(), 4);
        assert!(s.theset().is_empty(), "insertion waits for own delivery");

        let bad = Element::random_invalid(ProcessId(100), &mut fx.rng);
        let mut out = Outbox::default();
        assert_eq!(s.add(bad, SimTime(0), &mut out), Err(AddError::InvalidElement));
        assert!(out.is_empty());

        s.on_deliver_add(&[e.clone()]);
        assert_eq!(s.add(e, SimTime(0), &mut out), Err(AddError::AlreadyPresent));
        assert!(out.is_empty());
    }

    #[test]
    fn epoch_inc_checks_h() {
        let (mut s, _) = server(Algorithm::Fast, AggConfig::default(), false);
        let mut out = Outbox::default();
        assert_eq!(
            s.epoch_inc(EpochNumber(2), &mut out),
            Err(EpochIncError { requested: EpochNumber(2), current: EpochNumber(0) })
        );
        s.epoch_inc(EpochNumber(1), &mut out).unwrap();
        assert_eq!(brb_inits(&out), vec![SetchainPayload::EpochInc(EpochNumber(1))]);
    }

    #[test]
    fn batch_delivery_filters_invalid_members() {
        let (mut s, mut fx) = server(Algorithm::FastAgg, AggConfig::default(), false);
        let good = fx.elem();
        let bad = Element::random_invalid(ProcessId(100), &mut fx.rng);
        s.on_deliver_add(&[good.clone(), bad.clone()]);
        assert!(s.theset().contains(&good) && !s.theset().contains(&bad));
        s.on_deliver_add(&[good.clone()]);
        assert_eq!(s.theset().len(), 1);
        assert_eq!(s.take_new_elements(), vec![good]);
    }

    #[test]
    fn epochinc_proposes_unstamped_once_and_buffers_future() {
        let (mut s, mut fx) = server(Algorithm::Fast, AggConfig::default(), false);
        let a = fx.elem();
        s.on_deliver_add(&[a.clone()]);
        let mut out = Outbox::default();
        s.on_deliver_epochinc(EpochNumber(1), &mut out);
        assert_eq!(proposals(&out), vec![(EpochNumber(1), [a.clone()].into())]);
        let mut out = Outbox::default();
        s.on_deliver_epochinc(EpochNumber(1), &mut out);
        assert!(out.is_empty());

        s.on_deliver_epochinc(EpochNumber(3), &mut out);
        assert!(out.is_empty());
        s.on_set_deliver(EpochNumber(1), propset(&[(0, &[&a])]), SimTime(0), &mut out);
        assert!(proposals(&out).is_empty());
        s.on_set_deliver(EpochNumber(2), propset(&[]), SimTime(0), &mut out);
        let p = proposals(&out);
        assert_eq!(p, vec![(EpochNumber(3), ElementSet::new())]);
        // Stale announcements are dropped.
        let mut out = Outbox::default();
        s.on_deliver_epochinc(EpochNumber(2), &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn set_deliver_computes_stamp_set() {
        let (mut s, mut fx) = server(Algorithm::Fast, AggConfig::default(), false);
        let (a, b) = (fx.elem(), fx.elem());
        let bad = Element::random_invalid(ProcessId(3), &mut fx.rng);
        let mut out = Outbox::default();
        s.on_set_deliver(EpochNumber(1), propset(&[(1, &[&a]), (2, &[&a, &b]), (3, &[&bad])]), SimTime(0), &mut out);
        assert_eq!(s.epoch(), EpochNumber(1));
        assert_eq!(s.history().get(EpochNumber(1)).unwrap(), &ElementSet::from([a.clone(), b.clone()]));
        assert!(s.theset().contains(&a) && s.theset().contains(&b) && !s.theset().contains(&bad));

        let c = fx.elem();
        s.on_set_deliver(EpochNumber(2), propset(&[(1, &[&a, &c])]), SimTime(0), &mut out);
        assert_eq!(s.history().get(EpochNumber(2)).unwrap(), &ElementSet::from([c]));
        assert!(s.unstamped().is_empty());
        assert!(s.history().find_overlap().is_none());
    }

    #[test]
    fn out_of_order_set_deliver_is_buffered() {
        let (mut s, mut fx) = server(Algorithm::Fast, AggConfig::default(), false);
        let (a, b) = (fx.elem(), fx.elem());
        let mut out = Outbox::default();
        s.on_set_deliver(EpochNumber(2), propset(&[(0, &[&b])]), SimTime(0), &mut out);
        assert_eq!(s.epoch(), EpochNumber(0));
        s.on_set_deliver(EpochNumber(1), propset(&[(0, &[&a])]), SimTime(0), &mut out);
        assert_eq!(s.epoch(), EpochNumber(2));
        assert_eq!(s.epoch_of(&b), Some(EpochNumber(2)));
    }

    #[test]
    fn aggregation_flushes_after_max_batch() {
        let agg = AggConfig { max_batch: 3, max_wait: SimTime(1000) };
        let (mut s, mut fx) = server(Algorithm::FastAgg, agg, false);
        let mut out = Outbox::default();
        for i in 0..3 {
            s.add(fx.elem(), SimTime(i), &mut out).unwrap();
        }
        assert!(brb_inits(&out).is_empty());
        assert_eq!(out.timers, vec![(SimTime(1000), Timer::AggFlush)]);
        s.add(fx.elem(), SimTime(3), &mut out).unwrap();
        let inits = brb_inits(&out);
        assert_eq!(inits.len(), 1);
        assert_eq!(inits[0].elements().len(), 4);
        assert_eq!(s.tobroadcast_len(), 0);
        assert_eq!(s.stats().batches_flushed, 1);
    }

    #[test]
    fn aggregation_timeout() {
        let agg = AggConfig { max_batch: 100, max_wait: SimTime(50) };
        let (mut s, mut fx) = server(Algorithm::FastAgg, agg, false);
        let mut out = Outbox::default();
        s.on_flush_timer(SimTime(50), &mut out);
        assert!(out.is_empty(), "empty buffer never broadcasts");
        s.add(fx.elem(), SimTime(10), &mut out).unwrap();
        s.add(fx.elem(), SimTime(40), &mut out).unwrap();
        let mut out = Outbox::default();
        s.on_flush_timer(SimTime(59), &mut out);
        assert!(brb_inits(&out).is_empty());
        assert_eq!(out.timers, vec![(SimTime(60), Timer::AggFlush)]);
        s.on_flush_timer(SimTime(60), &mut out);
        assert_eq!(brb_inits(&out)[0].elements().len(), 2);
    }

    #[test]
    fn aggregated_proposal_includes_buffer_and_stamping_clears_it() {
        let (mut s, mut fx) = server(Algorithm::FastAgg, AggConfig::default(), false);
        let a = fx.elem();
        let mut out = Outbox::default();
        s.add(a.clone(), SimTime(0), &mut out).unwrap();
        s.on_deliver_epochinc(EpochNumber(1), &mut out);
        assert_eq!(proposals(&out), vec![(EpochNumber(1), [a.clone()].into())]);
        s.on_set_deliver(EpochNumber(1), propset(&[(0, &[&a])]), SimTime(2), &mut out);
        assert_eq!(s.tobroadcast_len(), 0);
        assert_eq!(s.epoch_of(&a), Some(EpochNumber(1)));
    }

    #[test]
    fn signing_adds_signed_hash_element() {
        let (mut s, mut fx) = server(Algorithm::Fast, AggConfig::default(), true);
        let a = fx.elem();
        let mut out = Outbox::default();
        s.on_set_deliver(EpochNumber(1), propset(&[(1, &[&a])]), SimTime(0), &mut out);
        let inits = brb_inits(&out);
        assert_eq!(inits.len(), 1);
        let seh = SignedEpochHash::from_element(&inits[0].elements()[0]).unwrap();
        assert_eq!(seh.h, EpochNumber(1));
        assert_eq!(seh.digest, hash_epoch(&[a].into()));
        assert_eq!(seh.signer, ProcessId(0));
        assert!(seh.verify(&fx.ring));

        // The next epoch holds only signatures and is left unsigned.
        let mut out = Outbox::default();
        s.on_set_deliver(EpochNumber(2), propset(&[(1, &[&seh.to_element()])]), SimTime(1), &mut out);
        assert!(brb_inits(&out).is_empty());
        let mut out = Outbox::default();
        s.on_set_deliver(EpochNumber(3), propset(&[]), SimTime(2), &mut out);
        assert!(brb_inits(&out).is_empty());
    }
}
