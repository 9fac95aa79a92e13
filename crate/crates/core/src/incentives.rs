//! Token rewards for signed epochs and the split of client insertion fees.
//!
//! All amounts are integer token units, so splits conserve exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{hash_epoch, EpochNumber, History, Keyring, ProcessId, SignedEpochHash};

pub const PPM: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum IncentiveError {
    #[error("invalid-signer-count: {signers} signers with {n} servers")]
    InvalidSignerCount { signers: usize, n: usize },
    #[error("no-signers")]
    NoSigners,
    #[error("invalid-params: {0}")]
    InvalidParams(&'static str),
}

/// Tokens per unit, strictly increasing when `per_unit > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub per_unit: u64,
}

impl Linear {
    pub fn apply(self, x: u64) -> u64 {
        self.per_unit.saturating_mul(x)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    /// Base reward per signed epoch.
    pub base: u64,
    /// Signers at or below this count earn nothing.
    pub fault_bound: usize,
    pub n: usize,
    pub per_element: Linear,
    pub per_signer: Linear,
    /// Fee a client pays per insertion.
    pub insertion_fee: u64,
    /// Burned share of each fee, parts per million.
    pub burn_ppm: u64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            base: 1,
            fault_bound: 1,
            n: 4,
            per_element: Linear { per_unit: 1 },
            per_signer: Linear { per_unit: 1 },
            insertion_fee: 10,
            burn_ppm: PPM / 2,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), IncentiveError> {
        if self.per_element.per_unit == 0 || self.per_signer.per_unit == 0 {
            return Err(IncentiveError::InvalidParams("element and signer coefficients must be positive"));
        }
        if self.burn_ppm > PPM {
            return Err(IncentiveError::InvalidParams("burn ratio above one"));
        }
        if self.fault_bound >= self.n {
            return Err(IncentiveError::InvalidParams("fault bound must be below n"));
        }
        Ok(())
    }
}

/// Reward for an epoch of `elements` elements signed by `signers` servers.
pub fn reward(elements: u64, signers: usize, p: &RewardParams) -> Result<u64, IncentiveError> {
    if signers > p.n {
        return Err(IncentiveError::InvalidSignerCount { signers, n: p.n });
    }
    if signers <= p.fault_bound {
        return Ok(0);
    }
    Ok(p.base.saturating_add(p.per_element.apply(elements)).saturating_add(p.per_signer.apply(signers as u64)))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeeSplit {
    pub payouts: BTreeMap<ProcessId, u64>,
    pub burned: u64,
}

/// Burn `burn_ppm` of `fee` (rounded down) and split the rest equally; leftover
/// units go one each to the lowest ids.
pub fn fee_split(fee: u64, signers: &BTreeSet<ProcessId>, p: &RewardParams) -> Result<FeeSplit, IncentiveError> {
    if p.burn_ppm > PPM {
        return Err(IncentiveError::InvalidParams("burn ratio above one"));
    }
    let burned = ((fee as u128 * p.burn_ppm as u128) / PPM as u128) as u64;
    let rest = fee - burned;
    if signers.is_empty() {
        if p.burn_ppm < PPM {
            return Err(IncentiveError::NoSigners);
        }
        return Ok(FeeSplit { payouts: BTreeMap::new(), burned: fee });
    }
    let k = signers.len() as u64;
    let (each, extra) = (rest / k, rest % k);
    let payouts = signers.iter().enumerate().map(|(i, &s)| (s, each + u64::from((i as u64) < extra))).collect();
    Ok(FeeSplit { payouts, burned })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochReward {
    pub h: EpochNumber,
    /// Elements of the epoch that are not epoch signatures.
    pub elements: u64,
    pub signers: BTreeSet<ProcessId>,
    pub tokens: u64,
}

/// Rewards for every epoch of `history`. A server counts as a signer of epoch
/// `h` when a valid signature of it over the right digest is stamped in any
/// epoch at or after `h`.
pub fn epoch_rewards(
    history: &History,
    keyring: &Keyring,
    servers: &BTreeSet<ProcessId>,
    p: &RewardParams,
) -> Result<Vec<EpochReward>, IncentiveError> {
    let mut signers: BTreeMap<EpochNumber, BTreeSet<ProcessId>> = BTreeMap::new();
    for (at, set) in history.iter() {
        for e in set {
            let Some(seh) = SignedEpochHash::from_element(e) else { continue };
            if seh.h > at || !servers.contains(&seh.signer) || !seh.verify(keyring) {
                continue;
            }
            if history.get(seh.h).is_some_and(|s| hash_epoch(s) == seh.digest) {
                signers.entry(seh.h).or_default().insert(seh.signer);
            }
        }
    }
    history
        .iter()
        .map(|(h, set)| {
            let elements = set.iter().filter(|e| SignedEpochHash::from_element(e).is_none()).count() as u64;
            let signers = signers.remove(&h).unwrap_or_default();
            let tokens = reward(elements, signers.len(), p)?;
            Ok(EpochReward { h, elements, signers, tokens })
        })
        .collect()
}
