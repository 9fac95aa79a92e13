//! Domain types shared by every module.

pub mod crypto;
mod element;
mod history;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use crypto::{KeyPair, Keyring, SchemeKind, Signature};
pub use element::{hash_epoch, serialize_set, Element, ElementSet, PAYLOAD_LEN_MAX, PAYLOAD_LEN_MIN};
pub(crate) use element::{read_u32, read_u64};
pub use history::{EpochSummary, GetResult, History, StateSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    CorrectServer,
    ByzantineServer,
    Client,
    /// The abstract adversary process of the single-adversary model.
    ModelB,
    /// Harness services that are not protocol participants (the set-consensus decider).
    Service,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EpochNumber(pub u64);

impl EpochNumber {
    pub const ZERO: EpochNumber = EpochNumber(0);

    pub fn next(self) -> EpochNumber {
        EpochNumber(self.0 + 1)
    }
}

impl fmt::Display for EpochNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_string()[..12])
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = v.try_into().map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
        Ok(Digest(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated input")]
    Truncated,
    #[error("unknown tag {0:#04x}")]
    UnknownTag(u8),
    #[error("trailing bytes after message")]
    Trailing,
    #[error("digest does not match payload")]
    DigestMismatch,
}

const SEH_TAG: &[u8; 4] = b"SEH1";
const SEH_PAYLOAD_LEN: usize = 4 + 8 + 32;

/// A server's signature over `(h, digest)`, inserted into the Setchain as an ordinary
/// element whose payload is `"SEH1" | h:u64 | digest`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedEpochHash {
    pub h: EpochNumber,
    pub digest: Digest,
    pub signer: ProcessId,
    #[serde(with = "sig_hex")]
    pub signature: Signature,
}

mod sig_hex {
    use super::Signature;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(sig: &Signature, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&sig.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Signature, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Signature(hex::decode(s).map_err(serde::de::Error::custom)?))
    }
}

impl SignedEpochHash {
    pub fn signed_bytes(h: EpochNumber, digest: &Digest) -> Vec<u8> {
        let mut v = Vec::with_capacity(SEH_PAYLOAD_LEN);
        v.extend_from_slice(SEH_TAG);
        v.extend_from_slice(&h.0.to_be_bytes());
        v.extend_from_slice(&digest.0);
        v
    }

    pub fn sign(keys: &KeyPair, h: EpochNumber, digest: Digest) -> SignedEpochHash {
        let signature = keys.sign(&Self::signed_bytes(h, &digest));
        SignedEpochHash { h, digest, signer: keys.id(), signature }
    }

    pub fn to_element(&self) -> Element {
        Element::from_parts(self.signer, Self::signed_bytes(self.h, &self.digest), self.signature.clone())
    }

    /// Recognizes signed-hash elements by payload shape. Does not verify.
    pub fn from_element(e: &Element) -> Option<SignedEpochHash> {
        let p = e.payload();
        if p.len() != SEH_PAYLOAD_LEN || &p[..4] != SEH_TAG {
            return None;
        }
        let h = u64::from_be_bytes(p[4..12].try_into().unwrap());
        let digest = Digest(p[12..44].try_into().unwrap());
        Some(SignedEpochHash { h: EpochNumber(h), digest, signer: e.author(), signature: e.signature().clone() })
    }

    pub fn verify(&self, keyring: &Keyring) -> bool {
        keyring.verify(self.signer, &Self::signed_bytes(self.h, &self.digest), &self.signature)
    }
}
