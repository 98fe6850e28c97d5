//! Block-producing chain simulator with adversarial ordering policies and a
//! hard inclusion deadline of `T_eff` blocks after submission.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::ClearingClaim;
use crate::digest::{h, Digest};
use crate::membership::{MembershipProof, RegId, SerialNumber};
use crate::model::{Market, Order, PlayerId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("malformed transaction: {0}")]
    MalformedTx(String),
    #[error("relayers refuse a commitment whose proof does not verify")]
    InvalidProof,
    #[error("no relayer is registered")]
    NoRelayer,
}

/// Opening of a client commitment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientReveal {
    pub s: SerialNumber,
    pub r: Digest,
    pub order: Order,
    /// Registration token for the next round, if the client stays.
    pub reg_token_new: Option<RegId>,
}

/// Body of a resolution message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpClaim {
    Price(ClearingClaim),
    /// Nothing in the book crosses.
    NoCross,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxBody {
    Register { reg_id: RegId },
    CommitClient { com: Digest, proof: MembershipProof },
    CommitMm { com: Digest },
    RevealClient(ClientReveal),
    RevealMm { market: Market },
    Cp(CpClaim),
}

impl TxBody {
    pub fn kind(&self) -> &'static str {
        match self {
            TxBody::Register { .. } => "register",
            TxBody::CommitClient { .. } => "commit_client",
            TxBody::CommitMm { .. } => "commit_mm",
            TxBody::RevealClient(_) => "reveal_client",
            TxBody::RevealMm { .. } => "reveal_mm",
            TxBody::Cp(_) => "cp",
        }
    }

    pub fn digest(&self) -> Digest {
        h(&[b"tx", serde_json::to_string(self).expect("tx serializes").as_bytes()])
    }
}

/// Direct transactions carry their sender; relayed ones carry none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sender {
    Player(PlayerId),
    Relayed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tx {
    pub sender: Sender,
    pub body: TxBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxHandle(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pending {
    pub handle: TxHandle,
    pub tx: Tx,
    pub submit_height: u64,
}

/// A transaction placed in a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Included {
    pub handle: TxHandle,
    pub tx: Tx,
    pub submit_height: u64,
    pub height: u64,
    /// Relayer credited with a relayed transaction.
    pub relayer: Option<PlayerId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Include everything pending, in submission order.
    Identity,
    /// Include everything pending, newest first.
    Reverse,
    /// Include a random subset in random order.
    Random,
    /// Include nothing until forced.
    WithholdMax,
}

enum Policy {
    Identity,
    Reverse,
    Random(ChaCha8Rng),
    WithholdMax,
}

impl Policy {
    fn choose(&mut self, pending: &[Pending]) -> Vec<usize> {
        match self {
            Policy::Identity => (0..pending.len()).collect(),
            Policy::Reverse => (0..pending.len()).rev().collect(),
            Policy::Random(rng) => {
                let mut pick: Vec<usize> = (0..pending.len()).filter(|_| rng.gen_bool(0.5)).collect();
                pick.shuffle(rng);
                pick
            }
            Policy::WithholdMax => Vec::new(),
        }
    }
}

pub struct ChainState {
    height: u64,
    t_eff: u64,
    pending: Vec<Pending>,
    next_handle: u64,
    policy: Policy,
    relayers: Vec<PlayerId>,
    relay_rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new(t_eff: u64, policy: PolicyKind, seed: u64) -> ChainState {
        let policy = match policy {
            PolicyKind::Identity => Policy::Identity,
            PolicyKind::Reverse => Policy::Reverse,
            PolicyKind::Random => Policy::Random(ChaCha8Rng::seed_from_u64(seed)),
            PolicyKind::WithholdMax => Policy::WithholdMax,
        };
        ChainState {
            height: 0,
            t_eff,
            pending: Vec::new(),
            next_handle: 0,
            policy,
            relayers: Vec::new(),
            relay_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ee),
        }
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn t_eff(&self) -> u64 {
        self.t_eff
    }

    pub fn pending(&self) -> &[Pending] {
        &self.pending
    }

    pub fn register_relayer(&mut self, p: PlayerId) {
        if !self.relayers.contains(&p) {
            self.relayers.push(p);
        }
    }

    fn push(&mut self, tx: Tx) -> TxHandle {
        let handle = TxHandle(self.next_handle);
        self.next_handle += 1;
        self.pending.push(Pending { handle, tx, submit_height: self.height });
        handle
    }

    /// Submits a transaction signed by `from`. Client commitments must be relayed.
    pub fn submit(&mut self, from: PlayerId, body: TxBody) -> Result<TxHandle, ChainError> {
        if matches!(body, TxBody::CommitClient { .. }) {
            return Err(ChainError::MalformedTx("client commitments must go through a relayer".into()));
        }
        if from == PlayerId::PROTOCOL || from == PlayerId::BURN {
            return Err(ChainError::MalformedTx(format!("{from} cannot sign transactions")));
        }
        Ok(self.push(Tx { sender: Sender::Player(from), body }))
    }

    /// Hands a client commitment to the relayer pool. Relayers check the proof
    /// with `proof_ok` and drop it if it fails.
    pub fn relay<F>(&mut self, body: TxBody, proof_ok: F) -> Result<TxHandle, ChainError>
    where
        F: FnOnce(&Digest, &MembershipProof) -> bool,
    {
        let TxBody::CommitClient { com, proof } = &body else {
            return Err(ChainError::MalformedTx("only client commitments are relayed".into()));
        };
        if self.relayers.is_empty() {
            return Err(ChainError::NoRelayer);
        }
        if !proof_ok(com, proof) {
            return Err(ChainError::InvalidProof);
        }
        Ok(self.push(Tx { sender: Sender::Relayed, body }))
    }

    /// Produces the next block. The policy picks and orders transactions;
    /// anything reaching its deadline is appended in submission order.
    pub fn advance_block(&mut self) -> Vec<Included> {
        self.height += 1;
        let height = self.height;
        let mut chosen = self.policy.choose(&self.pending);
        let mut taken = vec![false; self.pending.len()];
        chosen.retain(|&i| i < taken.len() && !std::mem::replace(&mut taken[i], true));
        for (i, p) in self.pending.iter().enumerate() {
            if !taken[i] && p.submit_height + self.t_eff <= height {
                taken[i] = true;
                chosen.push(i);
            }
        }
        let mut slots: Vec<Option<Pending>> = std::mem::take(&mut self.pending).into_iter().map(Some).collect();
        let mut out = Vec::with_capacity(chosen.len());
        for i in chosen {
            let p = slots[i].take().expect("each index taken once");
            let relayer = match p.tx.sender {
                Sender::Relayed => Some(self.relayers[self.relay_rng.gen_range(0..self.relayers.len())]),
                Sender::Player(_) => None,
            };
            out.push(Included { handle: p.handle, tx: p.tx, submit_height: p.submit_height, height, relayer });
        }
        self.pending = slots.into_iter().flatten().collect();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::h;

    fn reg(i: u8) -> TxBody {
        TxBody::Register { reg_id: h(&[&[i]]) }
    }

    #[test]
    fn withhold_delays_to_deadline() {
        let mut c = ChainState::new(6, PolicyKind::WithholdMax, 1);
        for _ in 0..5 {
            c.advance_block();
        }
        c.submit(PlayerId(1), reg(1)).unwrap();
        for _ in 0..5 {
            assert!(c.advance_block().is_empty());
        }
        let b = c.advance_block();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].height, 11);
    }

    #[test]
    fn identity_and_reverse_orders() {
        let mut c = ChainState::new(3, PolicyKind::Identity, 1);
        c.submit(PlayerId(1), reg(1)).unwrap();
        c.submit(PlayerId(1), reg(2)).unwrap();
        let b = c.advance_block();
        assert_eq!(b.iter().map(|i| i.handle.0).collect::<Vec<_>>(), vec![0, 1]);
        let mut c = ChainState::new(3, PolicyKind::Reverse, 1);
        c.submit(PlayerId(1), reg(1)).unwrap();
        c.submit(PlayerId(1), reg(2)).unwrap();
        let b = c.advance_block();
        assert_eq!(b.iter().map(|i| i.handle.0).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn direct_commit_is_malformed() {
        let mut c = ChainState::new(3, PolicyKind::Identity, 1);
        let s = crate::membership::gen_secret(1);
        let ids = vec![s.reg_id()];
        let com = h(&[b"o"]);
        let proof = crate::membership::prove_membership(&s, &ids, &com.0).unwrap();
        let body = TxBody::CommitClient { com, proof };
        assert!(matches!(c.submit(PlayerId(1), body.clone()), Err(ChainError::MalformedTx(_))));
        assert_eq!(c.relay(body.clone(), |_, _| true), Err(ChainError::NoRelayer));
        c.register_relayer(PlayerId(7));
        assert_eq!(c.relay(body.clone(), |_, _| false), Err(ChainError::InvalidProof));
        c.relay(body, |_, _| true).unwrap();
        let b = c.advance_block();
        assert_eq!(b[0].relayer, Some(PlayerId(7)));
        assert!(matches!(c.relay(reg(1), |_, _| true), Err(ChainError::MalformedTx(_))));
    }

    #[test]
    fn relay_race_credits_one() {
        let mut c = ChainState::new(2, PolicyKind::Identity, 5);
        c.register_relayer(PlayerId(3));
        c.register_relayer(PlayerId(4));
        let s = crate::membership::gen_secret(2);
        let com = h(&[b"o"]);
        let proof = crate::membership::prove_membership(&s, &[s.reg_id()], &com.0).unwrap();
        c.relay(TxBody::CommitClient { com, proof }, |_, _| true).unwrap();
        let b = c.advance_block();
        assert_eq!(b.len(), 1);
        assert!(matches!(b[0].relayer, Some(PlayerId(3)) | Some(PlayerId(4))));
    }
}
