use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msg::{Msg, Outbox, Timer};
use crate::simnet::SimTime;
use crate::types::{Element, ElementSet, EpochNumber, GetResult, History, ProcessId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoGetResult {
    pub theset: ElementSet,
    pub history: History,
    pub epoch: EpochNumber,
    /// Stamped elements that were missing from the voted set and merged into it.
    pub merged_from_history: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DpoError {
    #[error("insufficient-responses: got {got}, need {need}")]
    InsufficientResponses { got: usize, need: usize },
}

/// Combines `get()` answers from distinct servers.
///
/// Elements reported by at least `f+1` servers form the set. The history is built
/// epoch by epoch while some set is reported identically by `f+1` of the servers still
/// in the running; servers that disagree, or whose epoch ends at the current index,
/// leave the running. Stamped elements are finally merged into the set so that the
/// history is always contained in it.
pub fn dpo_combine(responses: &[(ProcessId, GetResult)], f: usize) -> DpoGetResult {
    let quorum = f + 1;
    let mut votes: BTreeMap<&Element, usize> = BTreeMap::new();
    for (_, r) in responses {
        for e in &r.theset {
            *votes.entry(e).or_insert(0) += 1;
        }
    }
    let mut theset: ElementSet = votes.into_iter().filter(|(_, v)| *v >= quorum).map(|(e, _)| e.clone()).collect();

    let mut history = History::new();
    let mut i = EpochNumber(1);
    let mut running: Vec<&GetResult> = responses.iter().map(|(_, r)| r).filter(|r| r.epoch >= i).collect();
    loop {
        let mut groups: BTreeMap<&ElementSet, usize> = BTreeMap::new();
        for r in &running {
            if let Some(set) = r.history.get(i) {
                *groups.entry(set).or_insert(0) += 1;
            }
        }
        // Most votes first; ties broken by canonical set order.
        let Some((chosen, _)) = groups
            .into_iter()
            .filter(|(_, c)| *c >= quorum)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        else {
            break;
        };
        let chosen = chosen.clone();
        running.retain(|r| r.history.get(i) == Some(&chosen) && r.epoch != i);
        history.push(chosen);
        i = i.next();
    }
    let before = theset.len();
    theset.extend(history.elements().cloned());
    let merged_from_history = theset.len() - before;
    DpoGetResult { theset, history, epoch: EpochNumber(i.0 - 1), merged_from_history }
}

/// The `k` servers a client contacts, rotated by client id.
pub fn rotation(servers: &[ProcessId], client: ProcessId, start: usize, k: usize) -> Vec<ProcessId> {
    let n = servers.len();
    (0..k.min(n)).map(|j| servers[(client.0 as usize + start + j) % n]).collect()
}

#[derive(Clone, Debug)]
struct PendingGet {
    id: u64,
    deadline: SimTime,
    responses: Vec<(ProcessId, GetResult)>,
}

/// Quorum client: writes go to `f+1` servers, reads to `3f+1` servers and complete on
/// the first `2f+1` answers.
#[derive(Clone, Debug)]
pub struct DpoClient {
    id: ProcessId,
    f: usize,
    servers: Vec<ProcessId>,
    timeout: SimTime,
    next_req: u64,
    pending: Option<PendingGet>,
    results: Vec<Result<DpoGetResult, DpoError>>,
}

impl DpoClient {
    pub fn new(id: ProcessId, f: usize, servers: Vec<ProcessId>, timeout: SimTime) -> DpoClient {
        DpoClient { id, f, servers, timeout, next_req: 0, pending: None, results: Vec::new() }
    }

    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn add(&mut self, e: Element, out: &mut Outbox) {
        for s in rotation(&self.servers, self.id, 0, self.f + 1) {
            out.send(s, Msg::AddRequest(e.clone()));
        }
    }

    pub fn epoch_inc(&mut self, h: EpochNumber, out: &mut Outbox) {
        for s in rotation(&self.servers, self.id, 0, self.f + 1) {
            out.send(s, Msg::EpochIncRequest(h));
        }
    }

    /// Starts a read. Returns false if one is already in flight.
    pub fn get(&mut self, now: SimTime, out: &mut Outbox) -> bool {
        if self.pending.is_some() {
            return false;
        }
        self.next_req += 1;
        let id = self.next_req;
        for s in rotation(&self.servers, self.id, 0, 3 * self.f + 1) {
            out.send(s, Msg::GetRequest { id });
        }
        let deadline = now + self.timeout;
        out.timer(deadline, Timer::Client);
        self.pending = Some(PendingGet { id, deadline, responses: Vec::new() });
        true
    }

    pub fn in_flight(&self) -> bool {
        self.pending.is_some()
    }

    pub fn on_reply(&mut self, from: ProcessId, id: u64, result: &GetResult) {
        let need = 2 * self.f + 1;
        let Some(p) = &mut self.pending else { return };
        if p.id != id || p.responses.iter().any(|(s, _)| *s == from) {
            return;
        }
        p.responses.push((from, result.clone()));
        if p.responses.len() >= need {
            let p = self.pending.take().unwrap();
            self.results.push(Ok(dpo_combine(&p.responses, self.f)));
        }
    }

    pub fn on_timer(&mut self, now: SimTime) {
        if let Some(p) = &self.pending {
            if now >= p.deadline {
                let got = p.responses.len();
                self.pending = None;
                self.results.push(Err(DpoError::InsufficientResponses { got, need: 2 * self.f + 1 }));
            }
        }
    }

    pub fn results(&self) -> &[Result<DpoGetResult, DpoError>] {
        &self.results
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Keyring, SchemeKind};
    use std::collections::BTreeSet;
    use rand::SeedableRng;

    fn elems(k: usize) -> Vec<Element> {
        let mut ring = Keyring::new(SchemeKind::Mac, 0);
        let kp = ring.register(ProcessId(50));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        (0..k).map(|_| Element::random(&kp, &mut rng)).collect()
    }

    fn view(theset: &[&Element], epochs: &[&[&Element]]) -> GetResult {
        let mut history = History::new();
        for ep in epochs {
            history.push(ep.iter().map(|e| (*e).clone()).collect());
        }
        GetResult { theset: theset.iter().map(|e| (*e).clone()).collect(), epoch: history.last_epoch(), history }
    }

    #[test]
    fn identical_views_pass_through() {
        let es = elems(3);
        let v = view(&[&es[0], &es[1], &es[2]], &[&[&es[0]], &[&es[1]]]);
        let rs: Vec<_> = (0..4).map(|i| (ProcessId(i), v.clone())).collect();
        let r = dpo_combine(&rs, 1);
        assert_eq!(r.theset, v.theset);
        assert_eq!(r.history, v.history);
        assert_eq!(r.epoch, EpochNumber(2));
        assert_eq!(r.merged_from_history, 0);
    }

    #[test]
    fn disagreeing_server_is_pruned() {
        // Hand execution: servers 1 and 2 report history(1)={a}, server 3 reports {b}.
        // i=1: {a} has 2 ≥ f+1 votes → H(1)={a}; server 3 leaves N; servers 1, 2 have
        // epoch 1 and leave too; the loop stops with i=2 and returns epoch 1.
        let es = elems(2);
        let (a, b) = (&es[0], &es[1]);
        let rs = vec![
            (ProcessId(1), view(&[a], &[&[a]])),
            (ProcessId(2), view(&[a], &[&[a]])),
            (ProcessId(3), view(&[b], &[&[b]])),
        ];
        let r = dpo_combine(&rs, 1);
        assert_eq!(r.history.get(EpochNumber(1)), Some(&ElementSet::from([a.clone()])));
        assert_eq!(r.epoch, EpochNumber(1));
        assert!(!r.theset.contains(b));
    }

    #[test]
    fn lagging_server_stops_contributing_after_its_epoch() {
        let es = elems(2);
        let (a, b) = (&es[0], &es[1]);
        let rs = vec![
            (ProcessId(1), view(&[a, b], &[&[a], &[b]])),
            (ProcessId(2), view(&[a, b], &[&[a], &[b]])),
            (ProcessId(3), view(&[a], &[&[a]])),
        ];
        let r = dpo_combine(&rs, 1);
        assert_eq!(r.epoch, EpochNumber(2));
        // Only one vote for epoch 2 in a 3-server sample with f=1 would fail; here 2 votes.
        let rs2 = vec![rs[0].clone(), rs[2].clone(), rs[2].clone()];
        assert_eq!(dpo_combine(&rs2, 1).epoch, EpochNumber(1));
    }

    #[test]
    fn single_vote_fabrication_excluded() {
        let es = elems(2);
        let (a, z) = (&es[0], &es[1]);
        let rs = vec![
            (ProcessId(1), view(&[a], &[])),
            (ProcessId(2), view(&[a], &[])),
            (ProcessId(3), view(&[a, z], &[&[z]])),
        ];
        let r = dpo_combine(&rs, 1);
        assert_eq!(r.theset, ElementSet::from([a.clone()]));
        assert!(r.history.is_empty());
    }

    #[test]
    fn stamped_elements_are_merged_into_the_set() {
        let es = elems(1);
        let a = &es[0];
        // Two servers stamped a but one reports a theset missing it (possible only if
        // Byzantine); the stamped element is still returned in the set.
        let rs = vec![(ProcessId(1), view(&[a], &[&[a]])), (ProcessId(2), view(&[], &[&[a]])), (ProcessId(3), view(&[], &[]))];
        let r = dpo_combine(&rs, 1);
        assert!(r.theset.contains(a));
        assert_eq!(r.merged_from_history, 1);
    }

    #[test]
    fn client_message_counts_and_timeout() {
        let servers: Vec<ProcessId> = (0..4).map(ProcessId).collect();
        let mut c = DpoClient::new(ProcessId(10), 1, servers.clone(), SimTime(100));
        let mut out = Outbox::default();
        c.add(elems(1)[0].clone(), &mut out);
        let targets: BTreeSet<_> = out.msgs.iter().map(|(s, _)| *s).collect();
        assert_eq!((out.msgs.len(), targets.len()), (2, 2));

        let mut out = Outbox::default();
        assert!(c.get(SimTime(0), &mut out));
        assert_eq!(out.msgs.len(), 4);
        assert!(!c.get(SimTime(0), &mut out));
        c.on_reply(ProcessId(0), 1, &GetResult::default());
        c.on_reply(ProcessId(0), 1, &GetResult::default());
        c.on_timer(SimTime(100));
        assert_eq!(c.results(), &[Err(DpoError::InsufficientResponses { got: 1, need: 3 })]);

        let mut f0 = DpoClient::new(ProcessId(10), 0, servers, SimTime(100));
        let mut out = Outbox::default();
        f0.add(elems(1)[0].clone(), &mut out);
        assert_eq!(out.msgs.len(), 1);
    }
}
