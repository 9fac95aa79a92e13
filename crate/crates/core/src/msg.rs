//! Messages exchanged in a simulated cluster, and the Setchain payloads carried by BRB.

use std::sync::Arc;

use bytes::Bytes;

use crate::brb::{BrbFrame, Phase};
use crate::sbc::Propset;
use crate::simnet::{Message, SimTime};
use crate::types::{read_u32, read_u64, DecodeError, Element, ElementSet, EpochNumber, GetResult, ProcessId};

/// A Setchain message broadcast through BRB.
///
/// Encoding: `0x01 | element` for a single add, `0x02 | count:u32 | element*` for a
/// batch, `0x03 | h:u64` for an epoch increment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SetchainPayload {
    Add(Element),
    AddBatch(Vec<Element>),
    EpochInc(EpochNumber),
}

impl SetchainPayload {
    pub fn encode(&self) -> Bytes {
        let mut v = Vec::new();
        match self {
            SetchainPayload::Add(e) => {
                v.push(1);
                e.encode_into(&mut v);
            }
            SetchainPayload::AddBatch(s) => {
                v.push(2);
                v.extend_from_slice(&(s.len() as u32).to_be_bytes());
                for e in s {
                    e.encode_into(&mut v);
                }
            }
            SetchainPayload::EpochInc(h) => {
                v.push(3);
                v.extend_from_slice(&h.0.to_be_bytes());
            }
        }
        Bytes::from(v)
    }

    pub fn decode(bytes: &[u8]) -> Result<SetchainPayload, DecodeError> {
        let (&tag, mut buf) = bytes.split_first().ok_or(DecodeError::Truncated)?;
        let msg = match tag {
            1 => SetchainPayload::Add(Element::decode(&mut buf)?),
            2 => {
                let n = read_u32(&mut buf)? as usize;
                let mut s = Vec::with_capacity(n.min(buf.len() / 12 + 1));
                for _ in 0..n {
                    s.push(Element::decode(&mut buf)?);
                }
                SetchainPayload::AddBatch(s)
            }
            3 => SetchainPayload::EpochInc(EpochNumber(read_u64(&mut buf)?)),
            t => return Err(DecodeError::UnknownTag(t)),
        };
        if !buf.is_empty() {
            return Err(DecodeError::Trailing);
        }
        Ok(msg)
    }

    /// Element count read from an encoded payload header, without decoding elements.
    pub fn peek_element_count(bytes: &[u8]) -> usize {
        match bytes.first() {
            Some(1) => 1,
            Some(2) if bytes.len() >= 5 => u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize,
            _ => 0,
        }
    }

    pub fn elements(&self) -> &[Element] {
        match self {
            SetchainPayload::Add(e) => std::slice::from_ref(e),
            SetchainPayload::AddBatch(s) => s,
            SetchainPayload::EpochInc(_) => &[],
        }
    }
}

/// Messages and timers produced by a handler, released by the cluster when the
/// handler's processing completes.
#[derive(Debug, Default)]
pub struct Outbox {
    pub msgs: Vec<(ProcessId, Msg)>,
    pub timers: Vec<(SimTime, Timer)>,
}

impl Outbox {
    pub fn send(&mut self, to: ProcessId, msg: Msg) {
        self.msgs.push((to, msg));
    }

    pub fn timer(&mut self, at: SimTime, t: Timer) {
        self.timers.push((at, t));
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty() && self.timers.is_empty()
    }
}

/// Local timers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timer {
    EpochDriver,
    AggFlush,
    SbcDeadline(EpochNumber),
    SbcPublish(EpochNumber),
    Adversary,
    Client,
    Workload,
}

#[derive(Clone, Debug)]
pub enum Msg {
    Brb(BrbFrame),
    Propose { h: EpochNumber, prop: Arc<ElementSet> },
    Inform { h: EpochNumber, proposer: ProcessId, prop: Arc<ElementSet> },
    SetDeliver { h: EpochNumber, propset: Arc<Propset> },
    AddRequest(Element),
    EpochIncRequest(EpochNumber),
    GetRequest { id: u64 },
    GetReply { id: u64, result: Arc<GetResult> },
    Timer(Timer),
}

fn set_size(s: &ElementSet) -> usize {
    4 + s.iter().map(|e| e.encoded_len()).sum::<usize>()
}

impl Msg {
    /// Number of elements carried, used by the processing-cost model.
    pub fn element_count(&self) -> usize {
        match self {
            Msg::Brb(f) => f.payload.as_ref().map_or(0, |p| SetchainPayload::peek_element_count(p)),
            Msg::Propose { prop, .. } | Msg::Inform { prop, .. } => prop.len(),
            // Proposals overlap heavily; a server stamps each distinct element once.
            Msg::SetDeliver { propset, .. } => {
                propset.values().flatten().collect::<std::collections::BTreeSet<_>>().len()
            }
            Msg::AddRequest(_) => 1,
            Msg::GetReply { result, .. } => result.theset.len() + result.history.total_len(),
            _ => 0,
        }
    }
}

impl Message for Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::Brb(f) => match f.phase {
                Phase::Init => "brb-init",
                Phase::Echo => "brb-echo",
                Phase::Ready => "brb-ready",
            },
            Msg::Propose { .. } => "sbc-propose",
            Msg::Inform { .. } => "sbc-inform",
            Msg::SetDeliver { .. } => "sbc-set-deliver",
            Msg::AddRequest(_) => "add",
            Msg::EpochIncRequest(_) => "epoch-inc",
            Msg::GetRequest { .. } => "get",
            Msg::GetReply { .. } => "get-reply",
            Msg::Timer(_) => "timer",
        }
    }

    fn wire_size(&self) -> usize {
        match self {
            Msg::Brb(f) => f.encoded_len(),
            Msg::Propose { prop, .. } => 8 + set_size(prop),
            Msg::Inform { prop, .. } => 12 + set_size(prop),
            Msg::SetDeliver { propset, .. } => 8 + propset.values().map(|s| 4 + set_size(s)).sum::<usize>(),
            Msg::AddRequest(e) => e.encoded_len(),
            Msg::EpochIncRequest(_) => 8,
            Msg::GetRequest { .. } => 8,
            Msg::GetReply { result, .. } => {
                16 + set_size(&result.theset) + result.history.iter().map(|(_, s)| set_size(s)).sum::<usize>()
            }
            Msg::Timer(_) => 0,
        }
    }
}
