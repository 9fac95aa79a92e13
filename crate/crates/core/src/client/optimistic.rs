use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::dpo::rotation;
use crate::msg::{Msg, Outbox, Timer};
use crate::simnet::SimTime;
use crate::types::{hash_epoch, Digest, Element, EpochNumber, GetResult, Keyring, ProcessId, SignedEpochHash};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Wait between the add and the first probe of an attempt.
    pub wait: SimTime,
    /// The wait is multiplied by this factor on every further attempt.
    pub backoff: u64,
    /// Attempts before giving up.
    pub budget: u32,
    /// How long a probe waits for the reply.
    pub reply_timeout: SimTime,
    /// Fall back to quorum adds once the budget is spent.
    pub escalate: bool,
}

impl RetryPolicy {
    pub fn for_epoch_period(period: SimTime) -> RetryPolicy {
        RetryPolicy { wait: SimTime(3 * period.0), ..Default::default() }
    }

    pub fn wait_for(&self, attempt: u32) -> SimTime {
        SimTime(self.wait.0.saturating_mul(self.backoff.saturating_pow(attempt)))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { wait: SimTime(600), backoff: 2, budget: 5, reply_timeout: SimTime(100), escalate: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Confirmation {
    pub element_digest: Digest,
    pub epoch: EpochNumber,
    pub epoch_digest: Digest,
    pub signers: BTreeSet<ProcessId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "outcome")]
pub enum Outcome {
    Confirmed(Confirmation),
    Unconfirmed { attempts: u32, escalated: bool },
}

/// Looks for `f+1` distinct server signatures over the digest of an epoch that
/// contains `e`, recomputing the digest from the reported epoch set.
pub fn check_confirmation(
    e: &Element,
    reply: &GetResult,
    keyring: &Keyring,
    f: usize,
    servers: &BTreeSet<ProcessId>,
) -> Option<Confirmation> {
    for (h, set) in reply.history.iter() {
        if !set.contains(e) {
            continue;
        }
        let digest = hash_epoch(set);
        let signers: BTreeSet<ProcessId> = reply
            .theset
            .iter()
            .chain(reply.history.elements())
            .filter_map(SignedEpochHash::from_element)
            .filter(|s| s.h == h && s.digest == digest && servers.contains(&s.signer) && s.verify(keyring))
            .map(|s| s.signer)
            .collect();
        if signers.len() > f {
            return Some(Confirmation { element_digest: e.digest(), epoch: h, epoch_digest: digest, signers });
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Phase {
    Waiting,
    Probing { req: u64 },
}

#[derive(Clone, Debug)]
struct Op {
    element: Element,
    attempt: u32,
    target: ProcessId,
    phase: Phase,
    timer_at: SimTime,
}

/// Single-server client: one add, then probes with single `get` requests until the
/// element's epoch carries `f+1` matching signatures.
#[derive(Clone, Debug)]
pub struct OptimisticClient {
    id: ProcessId,
    f: usize,
    servers: Vec<ProcessId>,
    server_set: BTreeSet<ProcessId>,
    keyring: Arc<Keyring>,
    policy: RetryPolicy,
    next_req: u64,
    op: Option<Op>,
    outcomes: Vec<(Element, Outcome)>,
    probes: u64,
}

impl OptimisticClient {
    pub fn new(id: ProcessId, f: usize, servers: Vec<ProcessId>, keyring: Arc<Keyring>, policy: RetryPolicy) -> Self {
        let server_set = servers.iter().copied().collect();
        OptimisticClient {
            id,
            f,
            servers,
            server_set,
            keyring,
            policy,
            next_req: 0,
            op: None,
            outcomes: Vec::new(),
            probes: 0,
        }
    }

    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn busy(&self) -> bool {
        self.op.is_some()
    }

    pub fn outcomes(&self) -> &[(Element, Outcome)] {
        &self.outcomes
    }

    pub fn probes_sent(&self) -> u64 {
        self.probes
    }

    /// Server used for a given attempt.
    pub fn target(&self, attempt: u32) -> ProcessId {
        rotation(&self.servers, self.id, attempt as usize, 1)[0]
    }

    /// Starts an add-and-confirm. Returns false if an operation is in flight.
    pub fn start(&mut self, e: Element, now: SimTime, out: &mut Outbox) -> bool {
        if self.op.is_some() {
            return false;
        }
        self.op = Some(Op { element: e, attempt: 0, target: self.target(0), phase: Phase::Waiting, timer_at: now });
        self.begin_attempt(now, out);
        true
    }

    fn begin_attempt(&mut self, now: SimTime, out: &mut Outbox) {
        let wait = {
            let op = self.op.as_ref().unwrap();
            self.policy.wait_for(op.attempt)
        };
        let op = self.op.as_mut().unwrap();
        op.phase = Phase::Waiting;
        op.timer_at = now + wait;
        out.send(op.target, Msg::AddRequest(op.element.clone()));
        out.timer(op.timer_at, Timer::Client);
    }

    pub fn on_timer(&mut self, now: SimTime, out: &mut Outbox) {
        let Some(op) = &mut self.op else { return };
        if now != op.timer_at {
            return;
        }
        match op.phase {
            Phase::Waiting => {
                self.next_req += 1;
                let req = self.next_req;
                op.phase = Phase::Probing { req };
                op.timer_at = now + self.policy.reply_timeout;
                out.send(op.target, Msg::GetRequest { id: req });
                out.timer(op.timer_at, Timer::Client);
                self.probes += 1;
            }
            Phase::Probing { .. } => self.fail_attempt(now, out),
        }
    }

    pub fn on_reply(&mut self, from: ProcessId, id: u64, result: &GetResult, now: SimTime, out: &mut Outbox) {
        let Some(op) = &self.op else { return };
        if op.phase != (Phase::Probing { req: id }) || from != op.target {
            return;
        }
        match check_confirmation(&op.element, result, &self.keyring, self.f, &self.server_set) {
            Some(c) => {
                let op = self.op.take().unwrap();
                self.outcomes.push((op.element, Outcome::Confirmed(c)));
            }
            None => self.fail_attempt(now, out),
        }
    }

    fn fail_attempt(&mut self, now: SimTime, out: &mut Outbox) {
        let op = self.op.as_mut().unwrap();
        op.attempt += 1;
        if op.attempt >= self.policy.budget {
            let op = self.op.take().unwrap();
            if self.policy.escalate {
                for s in rotation(&self.servers, self.id, 0, self.f + 1) {
                    out.send(s, Msg::AddRequest(op.element.clone()));
                }
            }
            let outcome = Outcome::Unconfirmed { attempts: op.attempt, escalated: self.policy.escalate };
            self.outcomes.push((op.element, outcome));
            return;
        }
        op.target = rotation(&self.servers, self.id, op.attempt as usize, 1)[0];
        self.begin_attempt(now, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ElementSet, History, SchemeKind};
    use rand::SeedableRng;

    struct Fx {
        ring: Arc<Keyring>,
        keys: Vec<crate::types::KeyPair>,
        e: Element,
    }

    fn fx() -> Fx {
        let mut ring = Keyring::new(SchemeKind::Ed25519, 3);
        let keys: Vec<_> = (0..4).map(|i| ring.register(ProcessId(i))).collect();
        let c = ring.register(ProcessId(10));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let e = Element::random(&c, &mut rng);
        Fx { ring: Arc::new(ring), keys, e }
    }

    fn reply_with(fx: &Fx, epoch_set: ElementSet, signers: &[usize], digest: Option<Digest>) -> GetResult {
        let d = digest.unwrap_or_else(|| hash_epoch(&epoch_set));
        let mut history = History::new();
        history.push(epoch_set.clone());
        let mut theset = epoch_set;
        for &i in signers {
            theset.insert(SignedEpochHash::sign(&fx.keys[i], EpochNumber(1), d).to_element());
        }
        GetResult { theset, history, epoch: EpochNumber(1) }
    }

    fn servers() -> BTreeSet<ProcessId> {
        (0..4).map(ProcessId).collect()
    }

    #[test]
    fn confirms_with_f_plus_one_signers() {
        let fx = fx();
        let r = reply_with(&fx, ElementSet::from([fx.e.clone()]), &[0, 1], None);
        let c = check_confirmation(&fx.e, &r, &fx.ring, 1, &servers()).unwrap();
        assert_eq!(c.epoch, EpochNumber(1));
        assert_eq!(c.signers.len(), 2);
        let json = serde_json::to_value(&c).unwrap();
        assert!(json.get("element-digest").is_some() && json.get("epoch-digest").is_some());
    }

    #[test]
    fn lone_signature_rejected() {
        let fx = fx();
        let r = reply_with(&fx, ElementSet::from([fx.e.clone()]), &[3], None);
        assert!(check_confirmation(&fx.e, &r, &fx.ring, 1, &servers()).is_none());
    }

    #[test]
    fn wrong_digest_signatures_not_counted() {
        let fx = fx();
        let r = reply_with(&fx, ElementSet::from([fx.e.clone()]), &[0, 1, 2], Some(Digest::of(b"forged")));
        assert!(check_confirmation(&fx.e, &r, &fx.ring, 1, &servers()).is_none());
    }

    #[test]
    fn non_server_signers_ignored() {
        let mut ring = Keyring::new(SchemeKind::Mac, 3);
        let outsider = ring.register(ProcessId(77));
        let fx = fx();
        let set = ElementSet::from([fx.e.clone()]);
        let mut r = reply_with(&fx, set.clone(), &[0], None);
        r.theset.insert(SignedEpochHash::sign(&outsider, EpochNumber(1), hash_epoch(&set)).to_element());
        assert!(check_confirmation(&fx.e, &r, &fx.ring, 1, &servers()).is_none());
    }

    #[test]
    fn one_message_per_add_and_probe_then_budget() {
        let fx = fx();
        let policy = RetryPolicy { wait: SimTime(10), backoff: 2, budget: 2, reply_timeout: SimTime(5), escalate: true };
        let mut c = OptimisticClient::new(ProcessId(10), 1, (0..4).map(ProcessId).collect(), fx.ring.clone(), policy);
        let mut out = Outbox::default();
        assert!(c.start(fx.e.clone(), SimTime(0), &mut out));
        assert_eq!(out.msgs.len(), 1);
        let first = out.msgs[0].0;
        assert_eq!(first, c.target(0));

        let mut out = Outbox::default();
        c.on_timer(SimTime(10), &mut out);
        assert_eq!(out.msgs.len(), 1);
        assert!(matches!(out.msgs[0].1, Msg::GetRequest { id: 1 }));

        // Unconfirmed reply moves to the next server with a doubled wait.
        let mut out = Outbox::default();
        c.on_reply(first, 1, &GetResult::default(), SimTime(12), &mut out);
        assert_eq!(out.msgs.len(), 1);
        assert_ne!(out.msgs[0].0, first);
        assert_eq!(out.timers, vec![(SimTime(32), Timer::Client)]);

        // Stale timer is ignored; the probe then times out and the budget runs out.
        let mut out = Outbox::default();
        c.on_timer(SimTime(15), &mut out);
        assert!(out.is_empty());
        c.on_timer(SimTime(32), &mut out);
        c.on_timer(SimTime(37), &mut out);
        assert_eq!(c.outcomes().len(), 1);
        assert_eq!(c.outcomes()[0].1, Outcome::Unconfirmed { attempts: 2, escalated: true });
        // probe + escalation to f+1 servers
        assert_eq!(out.msgs.iter().filter(|(_, m)| matches!(m, Msg::AddRequest(_))).count(), 2);
    }
}
