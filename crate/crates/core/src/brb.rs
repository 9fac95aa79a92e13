//! Byzantine reliable broadcast, Bracha style.
//!
//! Instances are keyed by `(origin, digest)`. A process echoes the first INIT it gets
//! from the origin itself, sends READY after `2f+1` ECHOs or `f+1` READYs, and
//! delivers after `2f+1` READYs once the payload is known.
//!
//! Frame encoding (big-endian):
//! `phase:u8 (1 INIT, 2 ECHO, 3 READY) | origin:u32 | digest:[32] | has_payload:u8 | [len:u32 | payload]`.

use std::collections::{BTreeSet, HashMap};

use bytes::Bytes;

use crate::types::{read_u32, DecodeError, Digest, ProcessId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Init,
    Echo,
    Ready,
}

impl Phase {
    fn tag(self) -> u8 {
        match self {
            Phase::Init => 1,
            Phase::Echo => 2,
            Phase::Ready => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrbFrame {
    pub phase: Phase,
    pub origin: ProcessId,
    pub digest: Digest,
    pub payload: Option<Bytes>,
}

impl BrbFrame {
    pub fn encoded_len(&self) -> usize {
        38 + self.payload.as_ref().map_or(0, |p| 4 + p.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.encoded_len());
        v.push(self.phase.tag());
        v.extend_from_slice(&self.origin.0.to_be_bytes());
        v.extend_from_slice(&self.digest.0);
        match &self.payload {
            None => v.push(0),
            Some(p) => {
                v.push(1);
                v.extend_from_slice(&(p.len() as u32).to_be_bytes());
                v.extend_from_slice(p);
            }
        }
        v
    }

    pub fn decode(bytes: &[u8]) -> Result<BrbFrame, DecodeError> {
        let mut buf = bytes;
        let (&tag, rest) = buf.split_first().ok_or(DecodeError::Truncated)?;
        buf = rest;
        let phase = match tag {
            1 => Phase::Init,
            2 => Phase::Echo,
            3 => Phase::Ready,
            t => return Err(DecodeError::UnknownTag(t)),
        };
        let origin = ProcessId(read_u32(&mut buf)?);
        if buf.len() < 33 {
            return Err(DecodeError::Truncated);
        }
        let digest = Digest(buf[..32].try_into().unwrap());
        let flag = buf[32];
        buf = &buf[33..];
        let payload = match flag {
            0 => None,
            1 => {
                let len = read_u32(&mut buf)? as usize;
                if buf.len() < len {
                    return Err(DecodeError::Truncated);
                }
                let p = Bytes::copy_from_slice(&buf[..len]);
                buf = &buf[len..];
                Some(p)
            }
            t => return Err(DecodeError::UnknownTag(t)),
        };
        if !buf.is_empty() {
            return Err(DecodeError::Trailing);
        }
        Ok(BrbFrame { phase, origin, digest, payload })
    }
}

#[derive(Clone, Debug, Default)]
pub struct BrbInstanceState {
    pub payload: Option<Bytes>,
    pub echoed: bool,
    pub echoes_seen: BTreeSet<ProcessId>,
    pub readies_seen: BTreeSet<ProcessId>,
    pub sent_ready: bool,
    pub delivered: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrbDelivery {
    pub origin: ProcessId,
    pub digest: Digest,
    pub payload: Bytes,
}

/// One process's BRB instance table.
#[derive(Clone, Debug)]
pub struct Brb {
    me: ProcessId,
    f: usize,
    peers: Vec<ProcessId>,
    instances: HashMap<(ProcessId, Digest), BrbInstanceState>,
}

pub type Outgoing = Vec<(ProcessId, BrbFrame)>;

impl Brb {
    /// `peers` is every BRB participant, including `me`.
    pub fn new(me: ProcessId, f: usize, peers: Vec<ProcessId>) -> Brb {
        Brb { me, f, peers, instances: HashMap::new() }
    }

    pub fn instance(&self, origin: ProcessId, digest: &Digest) -> Option<&BrbInstanceState> {
        self.instances.get(&(origin, *digest))
    }

    pub fn instances(&self) -> impl Iterator<Item = (&(ProcessId, Digest), &BrbInstanceState)> {
        self.instances.iter()
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    fn to_all(&self, frame: BrbFrame, out: &mut Outgoing) {
        for &p in &self.peers {
            out.push((p, frame.clone()));
        }
    }

    /// Starts broadcasting `payload`. Re-broadcasting identical bytes is a no-op.
    pub fn broadcast(&mut self, payload: Bytes, out: &mut Outgoing) -> Digest {
        let digest = Digest::of(&payload);
        let key = (self.me, digest);
        if self.instances.get(&key).is_some_and(|i| i.echoed) {
            return digest;
        }
        self.to_all(BrbFrame { phase: Phase::Init, origin: self.me, digest, payload: Some(payload) }, out);
        digest
    }

    /// Handles a frame received from `from`; returns a delivery at most once per instance.
    pub fn handle(&mut self, from: ProcessId, frame: BrbFrame, out: &mut Outgoing) -> Option<BrbDelivery> {
        if let Some(p) = &frame.payload {
            if Digest::of(p) != frame.digest {
                return None;
            }
        }
        if !self.peers.contains(&from) {
            return None;
        }
        let (echo_q, ready_amp, deliver_q) = (2 * self.f + 1, self.f + 1, 2 * self.f + 1);
        let key = (frame.origin, frame.digest);
        let inst = self.instances.entry(key).or_default();
        if inst.payload.is_none() {
            inst.payload = frame.payload.clone();
        }
        let mut send = Vec::new();
        match frame.phase {
            Phase::Init => {
                if from != frame.origin || frame.payload.is_none() {
                    return None;
                }
                if !inst.echoed {
                    inst.echoed = true;
                    send.push(BrbFrame { phase: Phase::Echo, ..frame.clone() });
                }
            }
            Phase::Echo => {
                inst.echoes_seen.insert(from);
                if inst.echoes_seen.len() >= echo_q && !inst.sent_ready {
                    inst.sent_ready = true;
                    send.push(BrbFrame { phase: Phase::Ready, payload: None, ..frame.clone() });
                }
            }
            Phase::Ready => {
                inst.readies_seen.insert(from);
                if inst.readies_seen.len() >= ready_amp && !inst.sent_ready {
                    inst.sent_ready = true;
                    send.push(BrbFrame { phase: Phase::Ready, payload: None, ..frame.clone() });
                }
            }
        }
        let delivery = match &inst.payload {
            Some(p) if !inst.delivered && inst.readies_seen.len() >= deliver_q => {
                inst.delivered = true;
                Some(BrbDelivery { origin: frame.origin, digest: frame.digest, payload: p.clone() })
            }
            _ => None,
        };
        for f in send {
            self.to_all(f, out);
        }
        delivery
    }
}
