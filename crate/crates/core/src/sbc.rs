//! Set Byzantine consensus as a deterministic harness service.
//!
//! Proposals travel to the service over the network. Instance `h` may only decide
//! after `h-1`. Its deadline is `max(first correct arrival + window, gst)`; at the
//! deadline the decision freezes every proposal registered so far (first call per
//! proposer), and `SetDeliver` is published to every server `decision_cost` ticks later.
//! Every proposal, counted or not, produces an `Inform` to the other servers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::msg::{Msg, Outbox, Timer};
use crate::simnet::SimTime;
use crate::types::{ElementSet, EpochNumber, ProcessId};

/// Decided value: proposer → proposed set.
pub type Propset = BTreeMap<ProcessId, ElementSet>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbcConfig {
    pub window: SimTime,
    /// Extra latency of a decision, standing in for the cost of consensus.
    pub decision_cost: SimTime,
}

impl Default for SbcConfig {
    fn default() -> Self {
        SbcConfig { window: SimTime(50), decision_cost: SimTime(100) }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SbcInstance {
    pub h: EpochNumber,
    pub proposals: Propset,
    pub arrivals: BTreeMap<ProcessId, SimTime>,
    pub extra_calls: usize,
    pub late_calls: usize,
    pub first_correct_arrival: Option<SimTime>,
    pub decide_deadline: Option<SimTime>,
    pub decided: Option<Arc<Propset>>,
    pub decided_at: Option<SimTime>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub h: EpochNumber,
    pub proposers: Vec<ProcessId>,
    pub union_size: usize,
    pub decided_at: SimTime,
}

#[derive(Clone, Debug)]
pub struct SbcService {
    cfg: SbcConfig,
    gst: SimTime,
    servers: Vec<ProcessId>,
    correct: BTreeSet<ProcessId>,
    instances: BTreeMap<EpochNumber, SbcInstance>,
    last_decided: EpochNumber,
    last_published: EpochNumber,
    records: Vec<DecisionRecord>,
    propose_calls: BTreeMap<EpochNumber, usize>,
    informs: BTreeMap<EpochNumber, usize>,
}

impl SbcService {
    pub fn new(cfg: SbcConfig, gst: SimTime, servers: Vec<ProcessId>, correct: BTreeSet<ProcessId>) -> SbcService {
        SbcService {
            cfg,
            gst,
            servers,
            correct,
            instances: BTreeMap::new(),
            last_decided: EpochNumber::ZERO,
            last_published: EpochNumber::ZERO,
            records: Vec::new(),
            propose_calls: BTreeMap::new(),
            informs: BTreeMap::new(),
        }
    }

    pub fn instance(&self, h: EpochNumber) -> Option<&SbcInstance> {
        self.instances.get(&h)
    }

    pub fn instances(&self) -> impl Iterator<Item = &SbcInstance> {
        self.instances.values()
    }

    pub fn last_decided(&self) -> EpochNumber {
        self.last_decided
    }

    /// No decision is pending publication and the next instance has no correct proposal.
    pub fn idle(&self) -> bool {
        self.last_published == self.last_decided
            && self
                .instances
                .get(&self.last_decided.next())
                .is_none_or(|i| i.first_correct_arrival.is_none())
    }

    pub fn records(&self) -> &[DecisionRecord] {
        &self.records
    }

    pub fn propose_calls(&self, h: EpochNumber) -> usize {
        self.propose_calls.get(&h).copied().unwrap_or(0)
    }

    pub fn informs(&self, h: EpochNumber) -> usize {
        self.informs.get(&h).copied().unwrap_or(0)
    }

    fn instance_mut(&mut self, h: EpochNumber) -> &mut SbcInstance {
        self.instances.entry(h).or_insert_with(|| SbcInstance { h, ..Default::default() })
    }

    fn arm(&mut self, h: EpochNumber, out: &mut Outbox) {
        let (window, gst) = (self.cfg.window, self.gst);
        let inst = self.instance_mut(h);
        if inst.decide_deadline.is_some() || inst.decided.is_some() {
            return;
        }
        if let Some(first) = inst.first_correct_arrival {
            let deadline = (first + window).max(gst);
            inst.decide_deadline = Some(deadline);
            out.timer(deadline, Timer::SbcDeadline(h));
        }
    }

    pub fn on_propose(&mut self, now: SimTime, by: ProcessId, h: EpochNumber, prop: Arc<ElementSet>, out: &mut Outbox) {
        *self.propose_calls.entry(h).or_insert(0) += 1;
        let correct = self.correct.contains(&by);
        let eligible = h == self.last_decided.next();
        let inst = self.instance_mut(h);
        if inst.decided.is_some() {
            inst.late_calls += 1;
        } else if inst.proposals.contains_key(&by) {
            inst.extra_calls += 1;
        } else {
            inst.proposals.insert(by, (*prop).clone());
            inst.arrivals.insert(by, now);
            if correct && inst.first_correct_arrival.is_none() {
                inst.first_correct_arrival = Some(now);
                if eligible {
                    self.arm(h, out);
                }
            }
        }
        let mut n = 0;
        for &s in &self.servers {
            if s != by {
                out.send(s, Msg::Inform { h, proposer: by, prop: prop.clone() });
                n += 1;
            }
        }
        *self.informs.entry(h).or_insert(0) += n.min(1);
    }

    pub fn on_deadline(&mut self, now: SimTime, h: EpochNumber, out: &mut Outbox) {
        if h != self.last_decided.next() {
            return;
        }
        let inst = self.instance_mut(h);
        if inst.decided.is_some() || inst.proposals.is_empty() {
            return;
        }
        let decided = Arc::new(inst.proposals.clone());
        inst.decided = Some(decided.clone());
        inst.decided_at = Some(now);
        let union: ElementSet = decided.values().flatten().cloned().collect();
        self.records.push(DecisionRecord {
            h,
            proposers: decided.keys().copied().collect(),
            union_size: union.len(),
            decided_at: now,
        });
        self.last_decided = h;
        out.timer(now + self.cfg.decision_cost, Timer::SbcPublish(h));
        self.arm(h.next(), out);
    }

    pub fn on_publish(&mut self, h: EpochNumber, out: &mut Outbox) {
        let Some(decided) = self.instances.get(&h).and_then(|i| i.decided.clone()) else { return };
        self.last_published = self.last_published.max(h);
        for &s in &self.servers {
            out.send(s, Msg::SetDeliver { h, propset: decided.clone() });
        }
    }

    pub fn on_timer(&mut self, now: SimTime, t: Timer, out: &mut Outbox) {
        match t {
            Timer::SbcDeadline(h) => self.on_deadline(now, h, out),
            Timer::SbcPublish(h) => self.on_publish(h, out),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Element, Keyring, SchemeKind};
    use rand::SeedableRng;

    fn svc(gst: u64) -> SbcService {
        let servers: Vec<ProcessId> = (0..4).map(ProcessId).collect();
        let correct = (0..3).map(ProcessId).collect();
        SbcService::new(SbcConfig::default(), SimTime(gst), servers, correct)
    }

    fn elems(k: usize) -> Vec<Element> {
        let mut ring = Keyring::new(SchemeKind::Mac, 0);
        let kp = ring.register(ProcessId(9));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        (0..k).map(|_| Element::random(&kp, &mut rng)).collect()
    }

    fn deadline(out: &Outbox) -> Option<SimTime> {
        out.timers.iter().find_map(|(t, k)| matches!(k, Timer::SbcDeadline(_)).then_some(*t))
    }

    #[test]
    fn identical_proposals_decide_exactly_that_set() {
        let es = elems(2);
        let p: Arc<ElementSet> = Arc::new(es.iter().cloned().collect());
        let mut s = svc(0);
        let mut out = Outbox::default();
        for i in 0..3 {
            s.on_propose(SimTime(10 + i), ProcessId(i as u32), EpochNumber(1), p.clone(), &mut out);
        }
        assert_eq!(deadline(&out), Some(SimTime(60)));
        s.on_deadline(SimTime(60), EpochNumber(1), &mut out);
        let d = s.instance(EpochNumber(1)).unwrap().decided.clone().unwrap();
        assert_eq!(d.keys().copied().collect::<Vec<_>>(), (0..3).map(ProcessId).collect::<Vec<_>>());
        let union: ElementSet = d.values().flatten().cloned().collect();
        assert_eq!(union, *p);
        assert_eq!(s.records()[0].union_size, 2);
    }

    #[test]
    fn byzantine_proposal_before_deadline_is_included() {
        let es = elems(2);
        let (a, z) = (Arc::new(ElementSet::from([es[0].clone()])), Arc::new(ElementSet::from([es[1].clone()])));
        let mut s = svc(0);
        let mut out = Outbox::default();
        for i in 0..3 {
            s.on_propose(SimTime(5), ProcessId(i), EpochNumber(1), a.clone(), &mut out);
        }
        s.on_propose(SimTime(6), ProcessId(3), EpochNumber(1), z.clone(), &mut out);
        s.on_deadline(SimTime(55), EpochNumber(1), &mut out);
        let d = s.instance(EpochNumber(1)).unwrap().decided.clone().unwrap();
        let union: ElementSet = d.values().flatten().cloned().collect();
        assert!(union.contains(&es[0]));
        assert!(union.is_subset(&ElementSet::from([es[0].clone(), es[1].clone()])));
    }

    #[test]
    fn deadline_respects_gst_and_order() {
        let mut s = svc(500);
        let mut out = Outbox::default();
        s.on_propose(SimTime(10), ProcessId(0), EpochNumber(2), Arc::default(), &mut out);
        assert_eq!(deadline(&out), None, "instance 2 waits for 1");
        s.on_propose(SimTime(20), ProcessId(1), EpochNumber(1), Arc::default(), &mut out);
        assert_eq!(deadline(&out), Some(SimTime(500)));
        let mut out = Outbox::default();
        s.on_deadline(SimTime(500), EpochNumber(1), &mut out);
        assert_eq!(s.last_decided(), EpochNumber(1));
        // Instance 2 already had a correct proposal and is armed right after 1 decides.
        assert_eq!(deadline(&out), Some(SimTime(500)));
        assert!(out.timers.contains(&(SimTime(600), Timer::SbcPublish(EpochNumber(1)))));
    }

    #[test]
    fn byzantine_only_instance_does_not_arm() {
        let mut s = svc(0);
        let mut out = Outbox::default();
        s.on_propose(SimTime(1), ProcessId(3), EpochNumber(1), Arc::default(), &mut out);
        assert_eq!(deadline(&out), None);
        assert_eq!(s.informs(EpochNumber(1)), 1);
    }

    #[test]
    fn informs_track_propose_calls_and_extra_calls_are_not_counted() {
        let es = elems(2);
        let mut s = svc(0);
        let mut out = Outbox::default();
        s.on_propose(SimTime(1), ProcessId(3), EpochNumber(1), Arc::new([es[0].clone()].into()), &mut out);
        s.on_propose(SimTime(2), ProcessId(3), EpochNumber(1), Arc::new([es[1].clone()].into()), &mut out);
        s.on_propose(SimTime(3), ProcessId(0), EpochNumber(1), Arc::default(), &mut out);
        assert_eq!(s.propose_calls(EpochNumber(1)), 3);
        assert_eq!(s.informs(EpochNumber(1)), 3);
        let inform_msgs = out.msgs.iter().filter(|(_, m)| matches!(m, Msg::Inform { .. })).count();
        assert_eq!(inform_msgs, 9);
        let inst = s.instance(EpochNumber(1)).unwrap();
        assert_eq!(inst.extra_calls, 1);
        assert_eq!(inst.proposals[&ProcessId(3)], ElementSet::from([es[0].clone()]));
    }

    #[test]
    fn publish_sends_identical_value_to_every_server() {
        let mut s = svc(0);
        let mut out = Outbox::default();
        s.on_propose(SimTime(1), ProcessId(0), EpochNumber(1), Arc::default(), &mut out);
        s.on_deadline(SimTime(51), EpochNumber(1), &mut out);
        let mut out = Outbox::default();
        s.on_publish(EpochNumber(1), &mut out);
        let payloads: Vec<_> = out
            .msgs
            .iter()
            .map(|(_, m)| match m {
                Msg::SetDeliver { propset, .. } => propset.clone(),
                _ => panic!(),
            })
            .collect();
        assert_eq!(payloads.len(), 4);
        assert!(payloads.windows(2).all(|w| Arc::ptr_eq(&w[0], &w[1])));
    }
}
