//! Registration secrets, Merkle accumulation of registration tokens and
//! membership proofs bound to a message with a one-time serial number.
//!
//! The zero-knowledge layer is simulated. A proof reveals the leaf opening
//! and the authentication path, so it is sound against double spending and
//! tampering but is not hiding.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{h, Digest};

pub type RegId = Digest;
pub type MerkleRoot = Digest;
pub type SerialNumber = Digest;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error("cannot accumulate an empty set")]
    EmptySet,
    #[error("secret is not registered in the given set")]
    NotAMember,
    #[error("malformed proof encoding: {0}")]
    Malformed(String),
}

/// Registration secret: serial number `s` and blinding value `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Secret {
    pub s: SerialNumber,
    pub r: Digest,
}

impl Secret {
    pub fn reg_id(&self) -> RegId {
        h(&[&self.s.0, &self.r.0])
    }
}

/// Deterministically derives a secret from a seed.
pub fn gen_secret(seed: u64) -> Secret {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut s = [0u8; 32];
    let mut r = [0u8; 32];
    rng.fill_bytes(&mut s);
    rng.fill_bytes(&mut r);
    Secret { s: Digest(s), r: Digest(r) }
}

fn node(l: &Digest, r: &Digest) -> Digest {
    h(&[&l.0, &r.0])
}

/// Leaves padded by duplicating the last one up to the next power of two,
/// with at least two leaves.
fn padded(reg_ids: &[RegId]) -> Result<Vec<Digest>, MembershipError> {
    let last = *reg_ids.last().ok_or(MembershipError::EmptySet)?;
    let width = reg_ids.len().next_power_of_two().max(2);
    let mut level = reg_ids.to_vec();
    level.resize(width, last);
    Ok(level)
}

/// Merkle root over the registration list.
pub fn accumulate(reg_ids: &[RegId]) -> Result<MerkleRoot, MembershipError> {
    let mut level = padded(reg_ids)?;
    while level.len() > 1 {
        level = level.chunks(2).map(|p| node(&p[0], &p[1])).collect();
    }
    Ok(level[0])
}

/// Simulated membership proof.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipProof {
    pub root: MerkleRoot,
    pub serial: SerialNumber,
    /// Blinding value of the leaf; with `serial` it opens the leaf.
    pub opening: Digest,
    pub leaf_index: u32,
    /// Sibling hashes from the leaf level upwards.
    pub path: Vec<Digest>,
    pub binding: Digest,
}

fn binding_of(root: &Digest, serial: &Digest, opening: &Digest, index: u32, path: &[Digest], message: &[u8]) -> Digest {
    let mut buf = Vec::with_capacity(104 + 32 * path.len() + message.len());
    buf.extend_from_slice(&root.0);
    buf.extend_from_slice(&serial.0);
    buf.extend_from_slice(&opening.0);
    buf.extend_from_slice(&index.to_be_bytes());
    for p in path {
        buf.extend_from_slice(&p.0);
    }
    buf.extend_from_slice(message);
    h(&[b"bind", &buf])
}

/// Proves that `secret` is registered in `reg_ids`, bound to `message`.
pub fn prove_membership(secret: &Secret, reg_ids: &[RegId], message: &[u8]) -> Result<MembershipProof, MembershipError> {
    let leaf = secret.reg_id();
    let index = reg_ids.iter().position(|x| *x == leaf).ok_or(MembershipError::NotAMember)?;
    let mut level = padded(reg_ids)?;
    let mut path = Vec::new();
    let mut i = index;
    while level.len() > 1 {
        path.push(level[i ^ 1]);
        level = level.chunks(2).map(|p| node(&p[0], &p[1])).collect();
        i /= 2;
    }
    let root = level[0];
    let index = index as u32;
    let binding = binding_of(&root, &secret.s, &secret.r, index, &path, message);
    Ok(MembershipProof { root, serial: secret.s, opening: secret.r, leaf_index: index, path, binding })
}

/// Checks a proof against `root` and `message` without touching any nullifier set.
pub fn check_proof(proof: &MembershipProof, root: &MerkleRoot, message: &[u8]) -> bool {
    if proof.root != *root || proof.path.is_empty() || proof.path.len() > 32 {
        return false;
    }
    if (proof.leaf_index as u64) >> proof.path.len() != 0 {
        return false;
    }
    let mut acc = h(&[&proof.serial.0, &proof.opening.0]);
    let mut i = proof.leaf_index;
    for sib in &proof.path {
        acc = if i & 1 == 0 { node(&acc, sib) } else { node(sib, &acc) };
        i >>= 1;
    }
    if acc != *root {
        return false;
    }
    proof.binding == binding_of(&proof.root, &proof.serial, &proof.opening, proof.leaf_index, &proof.path, message)
}

/// Used serial numbers.
pub type NullifierSet = BTreeSet<SerialNumber>;

/// Verifies a proof and, on success, consumes its serial number.
pub fn verify_membership(proof: &MembershipProof, root: &MerkleRoot, message: &[u8], nullifiers: &mut NullifierSet) -> bool {
    if nullifiers.contains(&proof.serial) || !check_proof(proof, root, message) {
        return false;
    }
    nullifiers.insert(proof.serial);
    true
}

impl MembershipProof {
    /// Binary layout:
    /// `root(32) | serial(32) | opening(32) | leaf_index(u32 BE) | path_len(u32 BE) | path(32 each) | binding(32)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(136 + 32 * self.path.len());
        out.extend_from_slice(&self.root.0);
        out.extend_from_slice(&self.serial.0);
        out.extend_from_slice(&self.opening.0);
        out.extend_from_slice(&self.leaf_index.to_be_bytes());
        out.extend_from_slice(&(self.path.len() as u32).to_be_bytes());
        for p in &self.path {
            out.extend_from_slice(&p.0);
        }
        out.extend_from_slice(&self.binding.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MembershipProof, MembershipError> {
        let bad = |m: &str| MembershipError::Malformed(m.to_string());
        if bytes.len() < 136 {
            return Err(bad("too short"));
        }
        let d = |at: usize| Digest(bytes[at..at + 32].try_into().expect("32 bytes"));
        let leaf_index = u32::from_be_bytes(bytes[96..100].try_into().expect("4 bytes"));
        let n = u32::from_be_bytes(bytes[100..104].try_into().expect("4 bytes")) as usize;
        if n > 32 || bytes.len() != 136 + 32 * n {
            return Err(bad("length does not match path count"));
        }
        let path = (0..n).map(|k| d(104 + 32 * k)).collect();
        Ok(MembershipProof {
            root: d(0),
            serial: d(32),
            opening: d(64),
            leaf_index,
            path,
            binding: d(104 + 32 * n),
        })
    }
}
