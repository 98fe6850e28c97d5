//! Sealed-bid batch exchange with market-maker width filtering.
//!
//! Layers, bottom up: [`model`] value types, [`ledger`] balances,
//! [`membership`] anonymous registration proofs, [`auction`] clearing,
//! [`chain`] block production, [`protocol`] the phase state machine,
//! [`analysis`] game-theoretic models and [`scenario`] the deterministic runner.

pub mod analysis;
pub mod auction;
pub mod chain;
pub mod digest;
pub mod ledger;
pub mod membership;
pub mod model;
pub mod protocol;
pub mod scenario;
