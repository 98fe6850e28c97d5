//! The single keyed hash used for registrations, commitments, tree nodes and
//! tie-breaks, plus seed derivation helpers.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// Domain key prefixed to every hash input.
pub const HASH_KEY: &[u8] = b"fairtradex/h/v1";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Digest, String> {
        let v = hex::decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; 32] = v.try_into().map_err(|_| "digest must be 32 bytes".to_string())?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Keyed hash of the concatenation of `parts`.
pub fn h(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update(HASH_KEY);
    for p in parts {
        hasher.update(p);
    }
    Digest(hasher.finalize().into())
}

/// Derives a component seed as the first 8 bytes of `h(seed || component)`.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let d = h(&[&seed.to_be_bytes(), component.as_bytes()]);
    u64::from_be_bytes(d.0[..8].try_into().expect("8 bytes"))
}
