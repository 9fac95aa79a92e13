use serde::{Deserialize, Serialize};

use super::{hash_epoch, Digest, Element, ElementSet, EpochNumber};

/// Map from epoch number to stamped set, with domain `1..=len`.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct History {
    epochs: Vec<ElementSet>,
}

impl History {
    pub fn new() -> Self {
        History::default()
    }

    /// Appends the set for the next epoch and returns its number.
    pub fn push(&mut self, set: ElementSet) -> EpochNumber {
        self.epochs.push(set);
        EpochNumber(self.epochs.len() as u64)
    }

    pub fn get(&self, h: EpochNumber) -> Option<&ElementSet> {
        if h.0 == 0 {
            return None;
        }
        self.epochs.get(h.0 as usize - 1)
    }

    pub fn last_epoch(&self) -> EpochNumber {
        EpochNumber(self.epochs.len() as u64)
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EpochNumber, &ElementSet)> {
        self.epochs.iter().enumerate().map(|(i, s)| (EpochNumber(i as u64 + 1), s))
    }

    /// The first epoch containing `e`. Linear in the number of epochs.
    pub fn epoch_of(&self, e: &Element) -> Option<EpochNumber> {
        self.iter().find(|(_, s)| s.contains(e)).map(|(h, _)| h)
    }

    pub fn contains(&self, e: &Element) -> bool {
        self.epoch_of(e).is_some()
    }

    pub fn elements(&self) -> impl Iterator<Item = &Element> {
        self.epochs.iter().flatten()
    }

    pub fn total_len(&self) -> usize {
        self.epochs.iter().map(|s| s.len()).sum()
    }

    /// Returns the first element found in two epochs, if any.
    pub fn find_overlap(&self) -> Option<(Element, EpochNumber, EpochNumber)> {
        let mut seen: std::collections::HashMap<&Element, EpochNumber> = Default::default();
        for (h, set) in self.iter() {
            for e in set {
                if let Some(prev) = seen.insert(e, h) {
                    return Some((e.clone(), prev, h));
                }
            }
        }
        None
    }

    pub fn truncated(&self, len: usize) -> History {
        History { epochs: self.epochs[..len.min(self.epochs.len())].to_vec() }
    }
}

/// A server's answer to `get()`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetResult {
    pub theset: ElementSet,
    pub history: History,
    pub epoch: EpochNumber,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub h: EpochNumber,
    pub digest: Digest,
    pub size: usize,
}

/// Compact JSON form of a server state for golden comparisons.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub epoch: EpochNumber,
    pub theset: Vec<Digest>,
    pub history: Vec<EpochSummary>,
}

impl StateSnapshot {
    pub fn of(r: &GetResult) -> StateSnapshot {
        StateSnapshot {
            epoch: r.epoch,
            theset: r.theset.iter().map(Element::digest).collect(),
            history: r
                .history
                .iter()
                .map(|(h, s)| EpochSummary { h, digest: hash_epoch(s), size: s.len() })
                .collect(),
        }
    }
}
