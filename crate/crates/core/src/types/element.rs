use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use super::crypto::{KeyPair, Keyring, Signature};
use super::{DecodeError, Digest, ProcessId};

/// Benchmark payload sizes, inclusive.
pub const PAYLOAD_LEN_MIN: usize = 116;
pub const PAYLOAD_LEN_MAX: usize = 126;

struct Inner {
    author: ProcessId,
    payload: Vec<u8>,
    signature: Signature,
}

/// An authenticated opaque payload. Cheap to clone.
///
/// Canonical encoding (all integers big-endian):
/// `author:u32 | payload_len:u32 | payload | sig_len:u32 | sig`.
/// [`Ord`] is lexicographic order over that encoding.
#[derive(Clone)]
pub struct Element(Arc<Inner>);

pub type ElementSet = BTreeSet<Element>;

impl Element {
    /// Signs `payload` as `keys.id()`.
    pub fn sign(keys: &KeyPair, payload: Vec<u8>) -> Element {
        let signature = keys.sign(&payload);
        Element::from_parts(keys.id(), payload, signature)
    }

    /// Builds an element without checking the signature (used for Byzantine and
    /// deliberately invalid elements).
    pub fn from_parts(author: ProcessId, payload: Vec<u8>, signature: Signature) -> Element {
        Element(Arc::new(Inner { author, payload, signature }))
    }

    /// A freshly signed element with a uniformly random payload of 116..=126 bytes.
    pub fn random<R: Rng + ?Sized>(keys: &KeyPair, rng: &mut R) -> Element {
        let len = rng.gen_range(PAYLOAD_LEN_MIN..=PAYLOAD_LEN_MAX);
        let mut payload = vec![0u8; len];
        rng.fill(&mut payload[..]);
        Element::sign(keys, payload)
    }

    /// An element whose signature cannot verify under any key.
    pub fn random_invalid<R: Rng + ?Sized>(author: ProcessId, rng: &mut R) -> Element {
        let len = rng.gen_range(PAYLOAD_LEN_MIN..=PAYLOAD_LEN_MAX);
        let mut payload = vec![0u8; len];
        rng.fill(&mut payload[..]);
        let mut sig = vec![0u8; 31];
        rng.fill(&mut sig[..]);
        Element::from_parts(author, payload, Signature(sig))
    }

    pub fn author(&self) -> ProcessId {
        self.0.author
    }

    pub fn payload(&self) -> &[u8] {
        &self.0.payload
    }

    pub fn signature(&self) -> &Signature {
        &self.0.signature
    }

    pub fn is_valid(&self, keyring: &Keyring) -> bool {
        keyring.verify(self.0.author, &self.0.payload, &self.0.signature)
    }

    pub fn encoded_len(&self) -> usize {
        12 + self.0.payload.len() + self.0.signature.0.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0.author.0.to_be_bytes());
        out.extend_from_slice(&(self.0.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.0.payload);
        out.extend_from_slice(&(self.0.signature.0.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.0.signature.0);
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut v);
        v
    }

    /// Decodes one element from the front of `buf`, advancing it.
    pub fn decode(buf: &mut &[u8]) -> Result<Element, DecodeError> {
        let author = ProcessId(read_u32(buf)?);
        let payload = read_chunk(buf)?;
        let sig = read_chunk(buf)?;
        Ok(Element::from_parts(author, payload, Signature(sig)))
    }

    /// SHA-256 of the canonical encoding.
    pub fn digest(&self) -> Digest {
        Digest(Sha256::digest(self.canonical_bytes()).into())
    }
}

pub(crate) fn read_u32(buf: &mut &[u8]) -> Result<u32, DecodeError> {
    if buf.len() < 4 {
        return Err(DecodeError::Truncated);
    }
    let (head, rest) = buf.split_at(4);
    *buf = rest;
    Ok(u32::from_be_bytes(head.try_into().unwrap()))
}

pub(crate) fn read_u64(buf: &mut &[u8]) -> Result<u64, DecodeError> {
    if buf.len() < 8 {
        return Err(DecodeError::Truncated);
    }
    let (head, rest) = buf.split_at(8);
    *buf = rest;
    Ok(u64::from_be_bytes(head.try_into().unwrap()))
}

fn read_chunk(buf: &mut &[u8]) -> Result<Vec<u8>, DecodeError> {
    let len = read_u32(buf)? as usize;
    if buf.len() < len {
        return Err(DecodeError::Truncated);
    }
    let (head, rest) = buf.split_at(len);
    *buf = rest;
    Ok(head.to_vec())
}

impl PartialEq for Element {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
            || (self.0.author == other.0.author
                && self.0.payload == other.0.payload
                && self.0.signature == other.0.signature)
    }
}

impl Eq for Element {}

impl Hash for Element {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.author.hash(state);
        self.0.payload.hash(state);
        self.0.signature.hash(state);
    }
}

// Field-wise comparison equals byte-wise comparison of the canonical encoding because
// the author is fixed-width and every variable field is preceded by its length.
impl Ord for Element {
    fn cmp(&self, other: &Self) -> Ordering {
        if Arc::ptr_eq(&self.0, &other.0) {
            return Ordering::Equal;
        }
        let (a, b) = (&*self.0, &*other.0);
        a.author
            .0
            .cmp(&b.author.0)
            .then(a.payload.len().cmp(&b.payload.len()))
            .then_with(|| a.payload.cmp(&b.payload))
            .then(a.signature.0.len().cmp(&b.signature.0.len()))
            .then_with(|| a.signature.0.cmp(&b.signature.0))
    }
}

impl PartialOrd for Element {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.digest().to_string();
        write!(f, "Element({}:{})", self.0.author.0, &d[..10])
    }
}

#[derive(Serialize, Deserialize)]
struct ElementRepr {
    author: u32,
    payload: String,
    signature: String,
}

impl Serialize for Element {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ElementRepr {
            author: self.0.author.0,
            payload: hex::encode(&self.0.payload),
            signature: hex::encode(&self.0.signature.0),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Element {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = ElementRepr::deserialize(d)?;
        let payload = hex::decode(&r.payload).map_err(serde::de::Error::custom)?;
        let sig = hex::decode(&r.signature).map_err(serde::de::Error::custom)?;
        Ok(Element::from_parts(ProcessId(r.author), payload, Signature(sig)))
    }
}

/// Canonical serialization of a set: for each element in canonical order,
/// `len:u32 | element-encoding`.
pub fn serialize_set(set: &ElementSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(set.iter().map(|e| e.encoded_len() + 4).sum());
    for e in set {
        out.extend_from_slice(&(e.encoded_len() as u32).to_be_bytes());
        e.encode_into(&mut out);
    }
    out
}

/// Digest of an epoch set: SHA-256 over [`serialize_set`].
pub fn hash_epoch(set: &ElementSet) -> Digest {
    let mut h = Sha256::new();
    for e in set {
        h.update((e.encoded_len() as u32).to_be_bytes());
        h.update(e.canonical_bytes());
    }
    Digest(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::crypto::SchemeKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Keyring, KeyPair, KeyPair, ChaCha8Rng) {
        let mut ring = Keyring::new(SchemeKind::Mac, 1);
        let a = ring.register(ProcessId(10));
        let b = ring.register(ProcessId(11));
        (ring, a, b, ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn valid_cases() {
        let (ring, a, _, mut rng) = setup();
        let e = Element::random(&a, &mut rng);
        assert!(e.is_valid(&ring));
        assert!((PAYLOAD_LEN_MIN..=PAYLOAD_LEN_MAX).contains(&e.payload().len()));

        let mut flipped = e.payload().to_vec();
        flipped[0] ^= 1;
        let bad = Element::from_parts(e.author(), flipped, e.signature().clone());
        assert!(!bad.is_valid(&ring));

        let moved = Element::from_parts(ProcessId(11), e.payload().to_vec(), e.signature().clone());
        assert!(!moved.is_valid(&ring));

        assert!(!Element::random_invalid(ProcessId(10), &mut rng).is_valid(&ring));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let (_, a, _, mut rng) = setup();
        let e = Element::random(&a, &mut rng);
        let bytes = e.canonical_bytes();
        assert_eq!(bytes.len(), e.encoded_len());
        let mut slice = &bytes[..];
        assert_eq!(Element::decode(&mut slice).unwrap(), e);
        assert!(slice.is_empty());
        let mut short = &bytes[..bytes.len() - 1];
        assert_eq!(Element::decode(&mut short), Err(DecodeError::Truncated));
    }

    #[test]
    fn order_matches_encoded_bytes() {
        let (_, a, b, mut rng) = setup();
        let mut elems: Vec<Element> = (0..40)
            .map(|i| {
                let k = if i % 2 == 0 { &a } else { &b };
                let len = rng.gen_range(0..4);
                let mut p = vec![0u8; len];
                rng.fill(&mut p[..]);
                Element::sign(k, p)
            })
            .collect();
        elems.sort();
        for w in elems.windows(2) {
            assert!(w[0].canonical_bytes() <= w[1].canonical_bytes());
        }
    }

    #[test]
    fn hash_epoch_examples() {
        let (_, a, _, mut rng) = setup();
        let x = Element::random(&a, &mut rng);
        let y = Element::random(&a, &mut rng);
        assert_eq!(hash_epoch(&ElementSet::new()), hash_epoch(&ElementSet::new()));
        // Empty serialization hashes to the SHA-256 of the empty string.
        assert_eq!(
            hash_epoch(&ElementSet::new()).to_string(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let xy: ElementSet = [x.clone(), y.clone()].into();
        let yx: ElementSet = [y.clone(), x.clone()].into();
        assert_eq!(hash_epoch(&xy), hash_epoch(&yx));
        assert_ne!(hash_epoch(&[x.clone()].into()), hash_epoch(&xy));
        assert_eq!(hash_epoch(&xy), Digest(Sha256::digest(serialize_set(&xy)).into()));
    }

    #[test]
    fn serde_roundtrip() {
        let (_, a, _, mut rng) = setup();
        let e = Element::random(&a, &mut rng);
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(serde_json::from_str::<Element>(&s).unwrap(), e);
    }
}
