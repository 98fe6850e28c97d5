//! Token balances, the protocol account, the burn sink and escrow records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PlayerId, Quantity, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("{player} holds {have} {tkn}, needs {need}")]
    InsufficientBalance { player: PlayerId, tkn: TokenId, have: Quantity, need: Quantity },
    #[error("the burn sink cannot spend")]
    UnspendableSink,
    #[error("balance overflow")]
    Overflow,
    #[error("escrow record {tag:?} holds {have}, needs {need}")]
    EscrowShortfall { tag: EscrowTag, have: Quantity, need: Quantity },
}

/// Purpose of reference-token funds held by the protocol account.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EscrowTag {
    /// Pooled client registration escrows. Pooled because a commitment does
    /// not reveal which registration it spends.
    ClientEscrow,
    /// Pooled prepaid relayer fees.
    RelayFee,
    /// Market-maker escrow for the current round.
    MarketMaker(PlayerId),
    /// Funds for resolution bounties, including forfeited deposits.
    Treasury,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    balances: BTreeMap<PlayerId, BTreeMap<TokenId, Quantity>>,
    minted: BTreeMap<TokenId, u128>,
    escrows: BTreeMap<EscrowTag, Quantity>,
}

/// Deep copy of all balances; serializes with sorted keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceSnapshot(pub BTreeMap<PlayerId, BTreeMap<TokenId, Quantity>>);

impl BalanceSnapshot {
    pub fn balance(&self, p: PlayerId, tkn: TokenId) -> Quantity {
        self.0.get(&p).and_then(|m| m.get(&tkn)).copied().unwrap_or(0)
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }
}

impl Ledger {
    pub fn new() -> Ledger {
        Ledger::default()
    }

    pub fn balance(&self, p: PlayerId, tkn: TokenId) -> Quantity {
        self.balances.get(&p).and_then(|m| m.get(&tkn)).copied().unwrap_or(0)
    }

    /// Creates tokens at setup time.
    pub fn mint(&mut self, to: PlayerId, tkn: TokenId, amt: Quantity) -> Result<(), LedgerError> {
        if amt == 0 {
            return Ok(());
        }
        let cur = self.balance(to, tkn);
        let new = cur.checked_add(amt).ok_or(LedgerError::Overflow)?;
        *self.minted.entry(tkn).or_default() += amt as u128;
        self.balances.entry(to).or_default().insert(tkn, new);
        Ok(())
    }

    pub fn transfer(&mut self, from: PlayerId, to: PlayerId, tkn: TokenId, amt: Quantity) -> Result<(), LedgerError> {
        if amt == 0 {
            return Ok(());
        }
        if from == PlayerId::BURN {
            return Err(LedgerError::UnspendableSink);
        }
        let have = self.balance(from, tkn);
        if have < amt {
            return Err(LedgerError::InsufficientBalance { player: from, tkn, have, need: amt });
        }
        if from == to {
            return Ok(());
        }
        let to_new = self.balance(to, tkn).checked_add(amt).ok_or(LedgerError::Overflow)?;
        self.balances.entry(from).or_default().insert(tkn, have - amt);
        self.balances.entry(to).or_default().insert(tkn, to_new);
        Ok(())
    }

    /// Moves `amt` to the burn sink; total supply is unchanged.
    pub fn burn(&mut self, from: PlayerId, tkn: TokenId, amt: Quantity) -> Result<(), LedgerError> {
        self.transfer(from, PlayerId::BURN, tkn, amt)
    }

    /// Moves reference tokens from `from` into the protocol account under `tag`.
    pub fn escrow(&mut self, from: PlayerId, tag: EscrowTag, amt: Quantity) -> Result<(), LedgerError> {
        self.transfer(from, PlayerId::PROTOCOL, TokenId::Ref, amt)?;
        *self.escrows.entry(tag).or_default() += amt;
        Ok(())
    }

    fn take_escrow(&mut self, tag: EscrowTag, amt: Quantity) -> Result<(), LedgerError> {
        let have = self.escrow_of(tag);
        if have < amt {
            return Err(LedgerError::EscrowShortfall { tag, have, need: amt });
        }
        if have == amt {
            self.escrows.remove(&tag);
        } else {
            self.escrows.insert(tag, have - amt);
        }
        Ok(())
    }

    /// Pays `amt` out of the escrow record `tag` to `to`.
    pub fn release(&mut self, tag: EscrowTag, to: PlayerId, amt: Quantity) -> Result<(), LedgerError> {
        if amt == 0 {
            return Ok(());
        }
        self.take_escrow(tag, amt)?;
        self.transfer(PlayerId::PROTOCOL, to, TokenId::Ref, amt)
    }

    /// Burns `amt` out of the escrow record `tag`.
    pub fn burn_escrow(&mut self, tag: EscrowTag, amt: Quantity) -> Result<(), LedgerError> {
        self.release(tag, PlayerId::BURN, amt)
    }

    /// Moves funds between two escrow records without leaving the protocol account.
    pub fn reassign(&mut self, from: EscrowTag, to: EscrowTag, amt: Quantity) -> Result<(), LedgerError> {
        if amt == 0 {
            return Ok(());
        }
        self.take_escrow(from, amt)?;
        *self.escrows.entry(to).or_default() += amt;
        Ok(())
    }

    pub fn escrow_of(&self, tag: EscrowTag) -> Quantity {
        self.escrows.get(&tag).copied().unwrap_or(0)
    }

    pub fn escrows(&self) -> &BTreeMap<EscrowTag, Quantity> {
        &self.escrows
    }

    pub fn snapshot(&self) -> BalanceSnapshot {
        let mut out = self.balances.clone();
        out.retain(|_, m| {
            m.retain(|_, v| *v > 0);
            !m.is_empty()
        });
        BalanceSnapshot(out)
    }

    pub fn total_held(&self, tkn: TokenId) -> u128 {
        self.balances.values().filter_map(|m| m.get(&tkn)).map(|v| *v as u128).sum()
    }

    pub fn minted(&self, tkn: TokenId) -> u128 {
        self.minted.get(&tkn).copied().unwrap_or(0)
    }

    /// Supply conservation, plus the reference balance of the protocol
    /// account covering every escrow record.
    pub fn check_conservation(&self) -> Result<(), String> {
        for tkn in [TokenId::Ref, TokenId::A, TokenId::B] {
            let held = self.total_held(tkn);
            let minted = self.minted(tkn);
            if held != minted {
                return Err(format!("{tkn}: held {held} != minted {minted}"));
            }
        }
        let escrowed: u128 = self.escrows.values().map(|v| *v as u128).sum();
        let protocol = self.balance(PlayerId::PROTOCOL, TokenId::Ref) as u128;
        if escrowed != protocol {
            return Err(format!("escrow records {escrowed} != protocol ref balance {protocol}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P1: PlayerId = PlayerId(1);
    const P2: PlayerId = PlayerId(2);

    #[test]
    fn exact_balance_transfer() {
        let mut l = Ledger::new();
        l.mint(P1, TokenId::Ref, 110).unwrap();
        l.transfer(P1, PlayerId::PROTOCOL, TokenId::Ref, 110).unwrap();
        assert_eq!(l.balance(P1, TokenId::Ref), 0);
        assert_eq!(l.balance(PlayerId::PROTOCOL, TokenId::Ref), 110);
    }

    #[test]
    fn overdraw_fails_without_effect() {
        let mut l = Ledger::new();
        l.mint(P1, TokenId::A, 5).unwrap();
        let before = l.snapshot();
        let err = l.transfer(P1, P2, TokenId::A, 6).unwrap_err();
        assert!(matches!(err, LedgerError::InsufficientBalance { have: 5, need: 6, .. }));
        assert_eq!(l.snapshot(), before);
    }

    #[test]
    fn zero_amount_is_noop() {
        let mut l = Ledger::new();
        l.transfer(P1, P2, TokenId::B, 0).unwrap();
        l.burn(P1, TokenId::B, 0).unwrap();
        assert!(l.snapshot().0.is_empty());
    }

    #[test]
    fn burn_sink_cannot_spend() {
        let mut l = Ledger::new();
        l.mint(P1, TokenId::Ref, 10).unwrap();
        l.burn(P1, TokenId::Ref, 4).unwrap();
        assert_eq!(l.balance(PlayerId::BURN, TokenId::Ref), 4);
        assert_eq!(l.transfer(PlayerId::BURN, P1, TokenId::Ref, 1), Err(LedgerError::UnspendableSink));
        l.check_conservation().unwrap();
    }

    #[test]
    fn escrow_records_track_protocol_funds() {
        let mut l = Ledger::new();
        l.mint(P1, TokenId::Ref, 100).unwrap();
        l.escrow(P1, EscrowTag::ClientEscrow, 60).unwrap();
        l.escrow(P1, EscrowTag::RelayFee, 10).unwrap();
        l.check_conservation().unwrap();
        l.release(EscrowTag::RelayFee, P2, 10).unwrap();
        l.burn_escrow(EscrowTag::ClientEscrow, 60).unwrap();
        assert!(l.escrows().is_empty());
        assert!(matches!(l.release(EscrowTag::ClientEscrow, P1, 1), Err(LedgerError::EscrowShortfall { .. })));
        assert_eq!(l.balance(PlayerId::BURN, TokenId::Ref), 60);
        l.check_conservation().unwrap();
    }

    #[test]
    fn snapshot_json_is_sorted() {
        let mut l = Ledger::new();
        l.mint(P2, TokenId::B, 1).unwrap();
        l.mint(P1, TokenId::A, 2).unwrap();
        l.mint(P1, TokenId::Ref, 3).unwrap();
        assert_eq!(l.snapshot().to_canonical_json(), r#"{"P1":{"ref":3,"a":2},"P2":{"b":1}}"#);
    }
}
