//! Seeded discrete-event network.
//!
//! Envelopes are delivered in `(deliver_at, seq)` order where `seq` is a global counter
//! assigned at send time. An optional per-message processing cost turns each process
//! into a FIFO single-server queue: a message that arrives while its recipient is busy
//! waits in the recipient's inbox. With no cost function every message is handled at
//! its delivery time.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ProcessId, ProcessKind};

/// Logical microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const TICKS_PER_SECOND: u64 = 1_000_000;

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub latency_min: SimTime,
    pub latency_max: SimTime,
    /// Global stabilization time.
    pub gst: SimTime,
    /// Upper bound on delay once the network is stable.
    pub post_gst_bound: SimTime,
    pub rng_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            latency_min: SimTime(1),
            latency_max: SimTime(5),
            gst: SimTime(0),
            post_gst_bound: SimTime(5),
            rng_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.latency_min > self.latency_max {
            return Err(SimError::BadConfig("latency_min > latency_max"));
        }
        if self.post_gst_bound < self.latency_min {
            return Err(SimError::BadConfig("post_gst_bound < latency_min"));
        }
        Ok(())
    }
}

/// Message types carried by the network report a kind tag and an encoded size for the log.
pub trait Message {
    fn kind(&self) -> &'static str;
    fn wire_size(&self) -> usize;
}

impl Message for Vec<u8> {
    fn kind(&self) -> &'static str {
        "bytes"
    }
    fn wire_size(&self) -> usize {
        self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope<M> {
    pub seq: u64,
    pub from: ProcessId,
    pub to: ProcessId,
    pub body: M,
    pub sent_at: SimTime,
    pub deliver_at: SimTime,
    /// Local timer rather than a network message.
    pub timer: bool,
}

/// An envelope handed to its recipient. `now` is when handling starts; `done` is when
/// the recipient's processing finishes, which is when its replies depart.
#[derive(Debug)]
pub struct Delivery<M> {
    pub envelope: Envelope<M>,
    pub now: SimTime,
    pub done: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t: SimTime,
    pub from: ProcessId,
    pub to: ProcessId,
    #[serde(rename = "type")]
    pub kind: String,
    pub size: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown process {0}")]
    UnknownProcess(ProcessId),
    #[error("process {0} registered twice")]
    DuplicateProcess(ProcessId),
    #[error("invalid network config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Error)]
#[error("handler failed at {entry:?}: {source}")]
pub struct RunError<E: std::error::Error + 'static> {
    pub entry: LogEntry,
    #[source]
    pub source: E,
}

struct Slot<M> {
    kind: ProcessKind,
    busy_until: SimTime,
    inbox: VecDeque<Envelope<M>>,
    wake_pending: bool,
}

enum Item<M> {
    Envelope(Envelope<M>),
    Wake(ProcessId),
}

struct Queued<M> {
    at: SimTime,
    seq: u64,
    item: Item<M>,
}

impl<M> PartialEq for Queued<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<M> Eq for Queued<M> {}
impl<M> PartialOrd for Queued<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Queued<M> {
    // Reversed so that BinaryHeap pops the earliest (at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

pub type CostFn<M> = Box<dyn Fn(ProcessId, ProcessKind, &M) -> u64 + Send>;

pub struct Simnet<M> {
    config: NetConfig,
    now: SimTime,
    next_seq: u64,
    rng: ChaCha8Rng,
    processes: BTreeMap<ProcessId, Slot<M>>,
    queue: BinaryHeap<Queued<M>>,
    in_flight: usize,
    log: Option<Vec<LogEntry>>,
    sent_by_kind: BTreeMap<&'static str, u64>,
    cost: Option<CostFn<M>>,
}

impl<M: Message> Simnet<M> {
    pub fn new(config: NetConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Simnet {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            now: SimTime::ZERO,
            next_seq: 0,
            processes: BTreeMap::new(),
            queue: BinaryHeap::new(),
            in_flight: 0,
            log: Some(Vec::new()),
            sent_by_kind: BTreeMap::new(),
            cost: None,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Disables (or re-enables) the delivery log; message counters are always kept.
    pub fn set_logging(&mut self, on: bool) {
        self.log = if on { Some(self.log.take().unwrap_or_default()) } else { None };
    }

    pub fn set_cost(&mut self, cost: CostFn<M>) {
        self.cost = Some(cost);
    }

    pub fn register(&mut self, id: ProcessId, kind: ProcessKind) -> Result<(), SimError> {
        if self.processes.contains_key(&id) {
            return Err(SimError::DuplicateProcess(id));
        }
        self.processes
            .insert(id, Slot { kind, busy_until: SimTime::ZERO, inbox: VecDeque::new(), wake_pending: false });
        Ok(())
    }

    pub fn kind(&self, id: ProcessId) -> Option<ProcessKind> {
        self.processes.get(&id).map(|s| s.kind)
    }

    pub fn processes(&self) -> impl Iterator<Item = (ProcessId, ProcessKind)> + '_ {
        self.processes.iter().map(|(id, s)| (*id, s.kind))
    }

    fn check(&self, id: ProcessId) -> Result<(), SimError> {
        if self.processes.contains_key(&id) {
            Ok(())
        } else {
            Err(SimError::UnknownProcess(id))
        }
    }

    fn push(&mut self, at: SimTime, item: Item<M>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        if let Item::Envelope(env) = &item {
            debug_assert_eq!(env.seq, seq);
        }
        self.queue.push(Queued { at, seq, item });
    }

    /// Draws the delivery time for a message departing at `depart`.
    fn delivery_time(&mut self, depart: SimTime) -> SimTime {
        let c = self.config;
        let delay = self.rng.gen_range(c.latency_min.0..=c.latency_max.0);
        let mut at = depart + delay;
        if depart >= c.gst {
            at = at.min(depart + c.post_gst_bound);
        } else {
            // Messages sent before stabilization still arrive within the bound after it.
            at = at.min(c.gst + c.post_gst_bound);
        }
        at
    }

    pub fn send(&mut self, from: ProcessId, to: ProcessId, body: M) -> Result<SimTime, SimError> {
        self.send_at(self.now, from, to, body)
    }

    /// Sends a message departing at `depart` (clamped to `now`).
    pub fn send_at(&mut self, depart: SimTime, from: ProcessId, to: ProcessId, body: M) -> Result<SimTime, SimError> {
        self.check(from)?;
        self.check(to)?;
        let depart = depart.max(self.now);
        let deliver_at = self.delivery_time(depart);
        *self.sent_by_kind.entry(body.kind()).or_insert(0) += 1;
        let env = Envelope { seq: self.next_seq, from, to, body, sent_at: depart, deliver_at, timer: false };
        self.in_flight += 1;
        self.push(deliver_at, Item::Envelope(env));
        Ok(deliver_at)
    }

    /// Schedules a local timer for `to` at `at` (clamped to `now`). Timers bypass the
    /// processing queue and are not counted as messages.
    pub fn schedule(&mut self, at: SimTime, to: ProcessId, body: M) -> Result<(), SimError> {
        self.check(to)?;
        let at = at.max(self.now);
        let env = Envelope { seq: self.next_seq, from: to, to, body, sent_at: self.now, deliver_at: at, timer: true };
        self.push(at, Item::Envelope(env));
        Ok(())
    }

    /// Network messages sent but not yet handled (in transit or waiting in an inbox).
    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|q| q.at)
    }

    pub fn sent_by_kind(&self) -> &BTreeMap<&'static str, u64> {
        &self.sent_by_kind
    }

    pub fn log(&self) -> &[LogEntry] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for e in self.log() {
            s.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            s.push('\n');
        }
        s
    }

    fn cost_of(&self, env: &Envelope<M>) -> u64 {
        match (&self.cost, self.processes.get(&env.to)) {
            (Some(f), Some(slot)) => f(env.to, slot.kind, &env.body),
            _ => 0,
        }
    }

    fn record(&mut self, t: SimTime, env: &Envelope<M>) {
        if let Some(log) = &mut self.log {
            log.push(LogEntry {
                t,
                from: env.from,
                to: env.to,
                kind: env.body.kind().to_string(),
                size: env.body.wire_size(),
            });
        }
    }

    /// Pops the next event due at or before `until`, advancing the clock.
    pub fn next(&mut self, until: SimTime) -> Option<Delivery<M>> {
        loop {
            if self.queue.peek()?.at > until {
                return None;
            }
            let Queued { at, item, .. } = self.queue.pop().unwrap();
            self.now = self.now.max(at);
            match item {
                Item::Envelope(env) if env.timer => {
                    self.record(at, &env);
                    return Some(Delivery { envelope: env, now: at, done: at });
                }
                Item::Envelope(env) => {
                    let to = env.to;
                    let slot = self.processes.get_mut(&to).expect("recipient checked at send");
                    if slot.busy_until <= at && slot.inbox.is_empty() {
                        return Some(self.start(at, env));
                    }
                    slot.inbox.push_back(env);
                    if !slot.wake_pending {
                        slot.wake_pending = true;
                        let wake = slot.busy_until.max(at);
                        self.push(wake, Item::Wake(to));
                    }
                }
                Item::Wake(pid) => {
                    let slot = self.processes.get_mut(&pid).unwrap();
                    slot.wake_pending = false;
                    if let Some(env) = slot.inbox.pop_front() {
                        let d = self.start(at, env);
                        let slot = self.processes.get_mut(&pid).unwrap();
                        if !slot.inbox.is_empty() {
                            slot.wake_pending = true;
                            let wake = slot.busy_until;
                            self.push(wake, Item::Wake(pid));
                        }
                        return Some(d);
                    }
                }
            }
        }
    }

    fn start(&mut self, at: SimTime, env: Envelope<M>) -> Delivery<M> {
        let done = at + self.cost_of(&env);
        self.processes.get_mut(&env.to).unwrap().busy_until = done;
        self.in_flight -= 1;
        self.record(at, &env);
        Delivery { envelope: env, now: at, done }
    }

    /// Moves the clock forward without processing anything.
    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }

    /// Processes every event due at or before `t` (inclusive) with `handler`, then sets
    /// the clock to `t`. Returns the log entries produced by this call (empty when
    /// logging is disabled).
    pub fn run_until<E, F>(&mut self, t: SimTime, mut handler: F) -> Result<Vec<LogEntry>, RunError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&mut Self, Delivery<M>) -> Result<(), E>,
    {
        let start = self.log().len();
        while let Some(d) = self.next(t) {
            let entry = LogEntry {
                t: d.now,
                from: d.envelope.from,
                to: d.envelope.to,
                kind: d.envelope.body.kind().to_string(),
                size: d.envelope.body.wire_size(),
            };
            handler(self, d).map_err(|source| RunError { entry, source })?;
        }
        self.now = self.now.max(t);
        Ok(self.log()[start.min(self.log().len())..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn net(cfg: NetConfig, n: u32) -> Simnet<Vec<u8>> {
        let mut s = Simnet::new(cfg).unwrap();
        for i in 0..n {
            s.register(ProcessId(i), ProcessKind::CorrectServer).unwrap();
        }
        s
    }

    fn ignore(_: &mut Simnet<Vec<u8>>, _: Delivery<Vec<u8>>) -> Result<(), Infallible> {
        Ok(())
    }

    #[test]
    fn degenerate_latency_delivers_after_one_tick() {
        let cfg = NetConfig { latency_min: SimTime(1), latency_max: SimTime(1), ..Default::default() };
        let mut s = net(cfg, 2);
        assert_eq!(s.send(ProcessId(0), ProcessId(1), vec![1]).unwrap(), SimTime(1));
    }

    #[test]
    fn run_until_boundary_is_inclusive() {
        let cfg = NetConfig { latency_min: SimTime(5), latency_max: SimTime(5), post_gst_bound: SimTime(5), ..Default::default() };
        let mut s = net(cfg, 2);
        assert!(s.run_until(SimTime(0), ignore).unwrap().is_empty());
        s.send(ProcessId(0), ProcessId(1), vec![7]).unwrap();
        assert!(s.run_until(SimTime(4), ignore).unwrap().is_empty());
        let log = s.run_until(SimTime(5), ignore).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].t, SimTime(5));
        assert_eq!(s.now(), SimTime(5));
    }

    #[test]
    fn equal_times_follow_send_order_and_reruns_match() {
        let run = || {
            let cfg = NetConfig { latency_min: SimTime(3), latency_max: SimTime(3), post_gst_bound: SimTime(3), ..Default::default() };
            let mut s = net(cfg, 4);
            for (i, to) in [3u32, 1, 2].into_iter().enumerate() {
                s.send(ProcessId(0), ProcessId(to), vec![i as u8]).unwrap();
            }
            let mut order = Vec::new();
            s.run_until(SimTime(10), |_, d| {
                order.push(d.envelope.to.0);
                Ok::<_, Infallible>(())
            })
            .unwrap();
            (order, s.log_jsonl())
        };
        let (order, log) = run();
        assert_eq!(order, vec![3, 1, 2]);
        assert_eq!(run().1, log);
    }

    #[test]
    fn post_gst_bound_holds_over_many_sends() {
        let cfg = NetConfig {
            latency_min: SimTime(1),
            latency_max: SimTime(500),
            gst: SimTime(100),
            post_gst_bound: SimTime(10),
            rng_seed: 9,
        };
        let mut s = net(cfg, 2);
        s.run_until(SimTime(100), ignore).unwrap();
        for _ in 0..10_000 {
            let at = s.send(ProcessId(0), ProcessId(1), vec![]).unwrap();
            assert!(at - s.now() <= SimTime(10));
            assert!(at - s.now() >= SimTime(1));
        }
    }

    #[test]
    fn pre_gst_messages_arrive_by_gst_plus_bound() {
        let cfg = NetConfig {
            latency_min: SimTime(1),
            latency_max: SimTime(10_000),
            gst: SimTime(300),
            post_gst_bound: SimTime(7),
            rng_seed: 1,
        };
        let mut s = net(cfg, 2);
        let mut late = 0;
        for _ in 0..1000 {
            let at = s.send(ProcessId(0), ProcessId(1), vec![]).unwrap();
            assert!(at <= SimTime(307));
            late += (at > SimTime(5)) as u32;
        }
        assert!(late > 900, "pre-gst delays should mostly exceed the stable bound");
    }

    #[test]
    fn unknown_process_is_an_error() {
        let mut s = net(NetConfig::default(), 1);
        assert_eq!(s.send(ProcessId(0), ProcessId(5), vec![]), Err(SimError::UnknownProcess(ProcessId(5))));
        assert_eq!(s.register(ProcessId(0), ProcessKind::Client), Err(SimError::DuplicateProcess(ProcessId(0))));
        assert!(Simnet::<Vec<u8>>::new(NetConfig { latency_min: SimTime(3), latency_max: SimTime(2), ..Default::default() }).is_err());
    }

    #[test]
    fn every_message_is_delivered_exactly_once() {
        let mut s = net(NetConfig { latency_max: SimTime(40), post_gst_bound: SimTime(40), rng_seed: 4, ..Default::default() }, 3);
        for i in 0..300u32 {
            s.send(ProcessId(i % 3), ProcessId((i + 1) % 3), i.to_be_bytes().to_vec()).unwrap();
        }
        let mut seen = std::collections::BTreeSet::new();
        s.run_until(SimTime(1000), |_, d| {
            assert!(seen.insert(d.envelope.body.clone()));
            Ok::<_, Infallible>(())
        })
        .unwrap();
        assert_eq!(seen.len(), 300);
        assert_eq!(s.in_flight(), 0);
    }

    #[test]
    fn processing_cost_serializes_a_busy_recipient() {
        let cfg = NetConfig { latency_min: SimTime(1), latency_max: SimTime(1), post_gst_bound: SimTime(1), ..Default::default() };
        let mut s = net(cfg, 2);
        s.set_cost(Box::new(|_, _, _| 10));
        for _ in 0..3 {
            s.send(ProcessId(0), ProcessId(1), vec![]).unwrap();
        }
        let mut starts = Vec::new();
        s.run_until(SimTime(100), |_, d| {
            starts.push((d.now.0, d.done.0));
            Ok::<_, Infallible>(())
        })
        .unwrap();
        assert_eq!(starts, vec![(1, 11), (11, 21), (21, 31)]);
    }

    #[test]
    fn timers_fire_in_order_and_are_not_messages() {
        let mut s = net(NetConfig::default(), 1);
        s.schedule(SimTime(9), ProcessId(0), vec![2]).unwrap();
        s.schedule(SimTime(3), ProcessId(0), vec![1]).unwrap();
        let mut got = Vec::new();
        s.run_until(SimTime(20), |_, d| {
            assert!(d.envelope.timer);
            got.push((d.now.0, d.envelope.body[0]));
            Ok::<_, Infallible>(())
        })
        .unwrap();
        assert_eq!(got, vec![(3, 1), (9, 2)]);
        assert!(s.sent_by_kind().is_empty());
    }

    #[derive(Debug, Error)]
    #[error("boom")]
    struct Boom;

    #[test]
    fn handler_failure_identifies_event() {
        let mut s = net(NetConfig { latency_min: SimTime(2), latency_max: SimTime(2), ..Default::default() }, 2);
        s.send(ProcessId(1), ProcessId(0), vec![1, 2, 3]).unwrap();
        let err = s.run_until(SimTime(10), |_, _| Err(Boom)).unwrap_err();
        assert_eq!(err.entry.from, ProcessId(1));
        assert_eq!(err.entry.t, SimTime(2));
        assert_eq!(err.entry.size, 3);
    }
}
