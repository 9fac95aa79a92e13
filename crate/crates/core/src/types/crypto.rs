//! Signature schemes. Keys are derived deterministically from a master seed so that
//! every simulation is reproducible; each process only ever holds its own [`KeyPair`].

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signer as _, Verifier as _};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::ProcessId;

type HmacSha256 = Hmac<Sha256>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    /// Keyed HMAC-SHA256. Fast, symmetric; the verifier holds the key, so it only
    /// models unforgeability because no process API hands out other processes' keys.
    #[default]
    Mac,
    Ed25519,
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signature(pub Vec<u8>);

impl Signature {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = hex::encode(&self.0);
        write!(f, "Signature({}..)", &h[..h.len().min(12)])
    }
}

#[derive(Clone)]
enum Secret {
    Mac([u8; 32]),
    Ed25519(Box<ed25519_dalek::SigningKey>),
}

#[derive(Clone, Debug)]
enum PublicKey {
    Mac([u8; 32]),
    Ed25519(ed25519_dalek::VerifyingKey),
}

/// A process's private signing capability.
#[derive(Clone)]
pub struct KeyPair {
    id: ProcessId,
    secret: Secret,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("id", &self.id).finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        match &self.secret {
            Secret::Mac(key) => {
                let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
                mac.update(msg);
                Signature(mac.finalize().into_bytes().to_vec())
            }
            Secret::Ed25519(sk) => Signature(sk.sign(msg).to_bytes().to_vec()),
        }
    }
}

fn derive_seed(kind: SchemeKind, master: u64, id: ProcessId) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(match kind {
        SchemeKind::Mac => b"setchain/mac-key".as_slice(),
        SchemeKind::Ed25519 => b"setchain/ed25519".as_slice(),
    });
    h.update(master.to_be_bytes());
    h.update(id.0.to_be_bytes());
    h.finalize().into()
}

/// Public-key directory for one run.
#[derive(Clone, Debug)]
pub struct Keyring {
    kind: SchemeKind,
    master: u64,
    publics: BTreeMap<ProcessId, PublicKey>,
}

impl Keyring {
    pub fn new(kind: SchemeKind, master_seed: u64) -> Self {
        Keyring { kind, master: master_seed, publics: BTreeMap::new() }
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    /// Registers `id` and returns its key pair. Registering twice yields the same keys.
    pub fn register(&mut self, id: ProcessId) -> KeyPair {
        let kp = self.derive(id);
        let public = match &kp.secret {
            Secret::Mac(k) => PublicKey::Mac(*k),
            Secret::Ed25519(sk) => PublicKey::Ed25519(sk.verifying_key()),
        };
        self.publics.insert(id, public);
        kp
    }

    fn derive(&self, id: ProcessId) -> KeyPair {
        let seed = derive_seed(self.kind, self.master, id);
        let secret = match self.kind {
            SchemeKind::Mac => Secret::Mac(seed),
            SchemeKind::Ed25519 => Secret::Ed25519(Box::new(ed25519_dalek::SigningKey::from_bytes(&seed))),
        };
        KeyPair { id, secret }
    }

    pub fn is_registered(&self, id: ProcessId) -> bool {
        self.publics.contains_key(&id)
    }

    pub fn members(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.publics.keys().copied()
    }

    /// Malformed signatures and unknown signers verify as false.
    pub fn verify(&self, signer: ProcessId, msg: &[u8], sig: &Signature) -> bool {
        match self.publics.get(&signer) {
            None => false,
            Some(PublicKey::Mac(key)) => {
                let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
                mac.update(msg);
                mac.verify_slice(&sig.0).is_ok()
            }
            Some(PublicKey::Ed25519(vk)) => match ed25519_dalek::Signature::from_slice(&sig.0) {
                Ok(s) => vk.verify(msg, &s).is_ok(),
                Err(_) => false,
            },
        }
    }
}
