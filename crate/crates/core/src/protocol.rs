//! The exchange state machine: registration, anonymous client commitments,
//! market-maker commitments, reveals, tight-market selection and resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{
    self, verify_clearing_price, verify_no_cross, AuctionBook, BookOrder, ClearingResult, Fill,
};
use crate::chain::{ClientReveal, CpClaim, Included, Sender, TxBody};
use crate::digest::{h, Digest};
use crate::ledger::{EscrowTag, Ledger, LedgerError};
use crate::membership::{accumulate, verify_membership, MembershipProof, MerkleRoot, NullifierSet, RegId, SerialNumber};
use crate::model::{
    div_floor, Market, ModelError, Order, OrderId, PlayerId, Price, PriceSpec, ProtocolParams, Quantity, Rational, Side,
    TokenId, Width,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Commit,
    Reveal,
    Resolution,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Commit => "commit",
            Phase::Reveal => "reveal",
            Phase::Resolution => "resolution",
        })
    }
}

/// Why a transaction had no effect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reject {
    NotInitialised,
    WrongPhase { phase: Phase },
    WrongSender,
    InsufficientFunds,
    AuctionFull,
    InvalidProof,
    UnknownRoot,
    Blacklisted,
    SerialUsed,
    AlreadyCommitted,
    UnknownCommitment,
    CommitmentMismatch,
    NotRegistered,
    BadOrder(String),
    BadMarket(String),
}

impl fmt::Display for Reject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reject::WrongPhase { phase } => write!(f, "wrong_phase({phase})"),
            Reject::BadOrder(m) => write!(f, "bad_order({m})"),
            Reject::BadMarket(m) => write!(f, "bad_market({m})"),
            other => {
                let s = serde_json::to_string(other).expect("reject serializes");
                f.write_str(s.trim_matches('"'))
            }
        }
    }
}

/// Effect of one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Applied(String),
    Rejected(Reject),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Applied(n) if n.is_empty() => f.write_str("applied"),
            Outcome::Applied(n) => write!(f, "applied: {n}"),
            Outcome::Rejected(r) => write!(f, "rejected: {r}"),
        }
    }
}

/// Bookkeeping failure that should be impossible; the run must stop.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantViolation {
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("auction: {0}")]
    Auction(#[from] auction::AuctionError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BurnRecord {
    /// Player id of a market maker, or hex serial of an anonymous client.
    pub account: String,
    pub amount: Quantity,
}

/// Public report of a resolved round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettlementReport {
    pub round: u64,
    pub height: u64,
    pub cp: Option<Price>,
    pub volume_b: Quantity,
    pub imbalance_a: i128,
    pub w_tight: Width,
    pub tight_mm: Option<PlayerId>,
    pub fills: Vec<Fill>,
    /// Orders refunded because the tight market was wider than they accept.
    pub width_filtered: Vec<OrderId>,
    pub burned: Vec<BurnRecord>,
    pub blacklisted: Vec<SerialNumber>,
    pub bounty_winner: PlayerId,
    pub bounty_paid: Quantity,
}

impl SettlementReport {
    /// Re-validates the conservation properties of the report.
    pub fn check(&self) -> Result<(), String> {
        let traded: Vec<Fill> = self.fills.iter().filter(|f| !self.width_filtered.contains(&f.order_id)).copied().collect();
        for f in &self.fills {
            if self.width_filtered.contains(&f.order_id) && (f.executed != 0 || f.received != 0) {
                return Err(format!("width-filtered order {} traded", f.order_id.0));
            }
        }
        let result = ClearingResult { cp: self.cp, volume_b: self.volume_b, imbalance_a: self.imbalance_a, fills: traded };
        result.check_invariants()?;
        if let Some(cp) = self.cp {
            for f in &result.fills {
                if f.side == Side::Sell && f.received as u128 != f.executed as u128 * cp.0 as u128 {
                    return Err(format!("seller {} not paid at the clearing price", f.order_id.0));
                }
            }
        }
        Ok(())
    }
}

/// Result of executing one included transaction.
#[derive(Debug, Clone)]
pub struct TxResult {
    pub outcome: Outcome,
    pub settlement: Option<SettlementReport>,
}

/// Phase change emitted at the end of a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseChange {
    pub from: Phase,
    pub to: Phase,
    pub note: String,
}

pub fn commit_order(order: &Order) -> Digest {
    h(&[b"order", &order.encode()])
}

pub fn commit_market(m: &Market) -> Digest {
    h(&[b"market", &m.encode()])
}

/// Minimum market sizes and market-maker funds, checked at reveal and again
/// when the reveal phase ends.
fn market_ok(params: &ProtocolParams, ledger: &Ledger, mm: PlayerId, m: &Market) -> Result<(), String> {
    m.validate().map_err(|e| e.to_string())?;
    let (num, den) = (*params.p_a.numer() as u128, *params.p_a.denom() as u128);
    let q = params.q_not as u128 * den;
    if q > m.size_bid as u128 * num {
        return Err("bid size below the notional floor".into());
    }
    if q > m.size_offer as u128 * num * m.offer.0 as u128 {
        return Err("offer size below the notional floor".into());
    }
    if m.size_bid > ledger.balance(mm, TokenId::A) {
        return Err("bid not backed by A balance".into());
    }
    if m.size_offer > ledger.balance(mm, TokenId::B) {
        return Err("offer not backed by B balance".into());
    }
    Ok(())
}

/// `floor(q / (p_a * price))`.
fn div_floor_priced(q: Quantity, p_a: &Rational, price: u64) -> Quantity {
    let den = *p_a.numer() as u128 * price as u128;
    if den == 0 {
        return 0;
    }
    (q as u128 * *p_a.denom() as u128 / den).min(u64::MAX as u128) as u64
}

pub struct Protocol {
    params: ProtocolParams,
    e_mm: Quantity,
    t_eff: u64,
    pub ledger: Ledger,
    phase: Option<Phase>,
    last_phase_change: u64,
    round: u64,
    clients: Vec<RegId>,
    roots: BTreeSet<MerkleRoot>,
    nullifiers: NullifierSet,
    blacklist: BTreeSet<SerialNumber>,
    client_commits: BTreeMap<SerialNumber, Digest>,
    mm_commits: BTreeMap<PlayerId, Digest>,
    revealed_mkts: Vec<(PlayerId, Market)>,
    curr_auc_notional: Quantity,
    buy_orders: Vec<BookOrder>,
    sell_orders: Vec<BookOrder>,
    next_order_id: u64,
    w_tight: Width,
    tight: Option<(PlayerId, Market)>,
    burned: Vec<BurnRecord>,
    blacklisted_now: Vec<SerialNumber>,
}

impl Protocol {
    pub fn new(params: ProtocolParams, ledger: Ledger) -> Result<Protocol, ModelError> {
        params.validate()?;
        Ok(Protocol {
            e_mm: params.e_mm()?,
            t_eff: params.t_eff()?,
            params,
            ledger,
            phase: None,
            last_phase_change: 0,
            round: 0,
            clients: Vec::new(),
            roots: BTreeSet::new(),
            nullifiers: NullifierSet::new(),
            blacklist: BTreeSet::new(),
            client_commits: BTreeMap::new(),
            mm_commits: BTreeMap::new(),
            revealed_mkts: Vec::new(),
            curr_auc_notional: 0,
            buy_orders: Vec::new(),
            sell_orders: Vec::new(),
            next_order_id: 0,
            w_tight: Width::Any,
            tight: None,
            burned: Vec::new(),
            blacklisted_now: Vec::new(),
        })
    }

    /// Opens the first commit phase.
    pub fn initialise(&mut self, height: u64) {
        self.phase = Some(Phase::Commit);
        self.last_phase_change = height;
        self.round = 1;
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn e_mm(&self) -> Quantity {
        self.e_mm
    }

    pub fn t_eff(&self) -> u64 {
        self.t_eff
    }

    pub fn phase(&self) -> Option<Phase> {
        self.phase
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn last_phase_change(&self) -> u64 {
        self.last_phase_change
    }

    pub fn clients(&self) -> &[RegId] {
        &self.clients
    }

    pub fn is_known_root(&self, root: &MerkleRoot) -> bool {
        self.roots.contains(root)
    }

    pub fn has_client_commit(&self, s: &SerialNumber) -> bool {
        self.client_commits.contains_key(s)
    }

    pub fn has_mm_commit(&self, mm: PlayerId) -> bool {
        self.mm_commits.contains_key(&mm)
    }

    pub fn is_blacklisted(&self, s: &SerialNumber) -> bool {
        self.blacklist.contains(s)
    }

    pub fn curr_auc_notional(&self) -> Quantity {
        self.curr_auc_notional
    }

    pub fn revealed_markets(&self) -> &[(PlayerId, Market)] {
        &self.revealed_mkts
    }

    pub fn w_tight(&self) -> Width {
        self.w_tight
    }

    pub fn tight_market(&self) -> Option<(PlayerId, Market)> {
        self.tight
    }

    /// The full book as it stands, before width filtering.
    pub fn book(&self) -> AuctionBook {
        AuctionBook {
            buy_orders: self.buy_orders.clone(),
            sell_orders: self.sell_orders.clone(),
            w_tight: self.w_tight,
            min_tick: self.params.min_tick,
        }
    }

    /// Safety properties checked after every block.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.ledger.check_conservation()?;
        let a: u128 = self.buy_orders.iter().map(|o| o.size as u128).sum();
        let b: u128 = self.sell_orders.iter().map(|o| o.size as u128).sum();
        if self.ledger.balance(PlayerId::PROTOCOL, TokenId::A) as u128 != a {
            return Err("protocol A balance differs from resting buy orders".into());
        }
        if self.ledger.balance(PlayerId::PROTOCOL, TokenId::B) as u128 != b {
            return Err("protocol B balance differs from resting sell orders".into());
        }
        let needed = self.params.e_client as u128 * self.client_commits.len() as u128;
        if (self.ledger.escrow_of(EscrowTag::ClientEscrow) as u128) < needed {
            return Err("client escrow pool below outstanding commitments".into());
        }
        for mm in self.mm_commits.keys().chain(self.revealed_mkts.iter().map(|(p, _)| p)) {
            if self.phase != Some(Phase::Resolution) && self.ledger.escrow_of(EscrowTag::MarketMaker(*mm)) < self.e_mm {
                return Err(format!("market maker {mm} escrow missing"));
            }
        }
        Ok(())
    }

    fn update_root(&mut self) {
        if let Ok(root) = accumulate(&self.clients) {
            self.roots.insert(root);
        }
    }

    fn guard_phase(&self, want: Phase) -> Result<(), Reject> {
        match self.phase {
            None => Err(Reject::NotInitialised),
            Some(p) if p == want => Ok(()),
            Some(p) => Err(Reject::WrongPhase { phase: p }),
        }
    }

    /// Executes one included transaction at `height`.
    pub fn execute(&mut self, inc: &Included) -> Result<TxResult, InvariantViolation> {
        let height = inc.height;
        let mut settlement = None;
        let res = match (&inc.tx.body, inc.tx.sender) {
            (TxBody::Register { reg_id }, Sender::Player(p)) => self.register(p, *reg_id),
            (TxBody::CommitClient { com, proof }, Sender::Relayed) => self.commit_client(*com, proof, inc.relayer),
            (TxBody::CommitMm { com }, Sender::Player(p)) => self.commit_mm(p, *com),
            (TxBody::RevealClient(rev), Sender::Player(p)) => self.reveal_client(p, rev),
            (TxBody::RevealMm { market }, Sender::Player(p)) => self.reveal_mm(p, market),
            (TxBody::Cp(claim), Sender::Player(p)) => self.resolve(p, claim, height).map(|r| {
                r.map(|(note, rep)| {
                    settlement = rep;
                    note
                })
            }),
            _ => Ok(Err(Reject::WrongSender)),
        }?;
        let outcome = match res {
            Ok(note) => Outcome::Applied(note),
            Err(r) => Outcome::Rejected(r),
        };
        Ok(TxResult { outcome, settlement })
    }

    fn register(&mut self, p: PlayerId, reg_id: RegId) -> Result<Result<String, Reject>, InvariantViolation> {
        let need = self.params.e_client as u128 + self.params.f_r as u128;
        if self.ledger.balance(p, TokenId::Ref) as u128 <= need {
            return Ok(Err(Reject::InsufficientFunds));
        }
        self.ledger.escrow(p, EscrowTag::ClientEscrow, self.params.e_client)?;
        self.ledger.escrow(p, EscrowTag::RelayFee, self.params.f_r)?;
        let dup = self.clients.contains(&reg_id);
        self.clients.push(reg_id);
        self.update_root();
        Ok(Ok(if dup { "duplicate registration".into() } else { String::new() }))
    }

    fn commit_client(
        &mut self,
        com: Digest,
        proof: &MembershipProof,
        relayer: Option<PlayerId>,
    ) -> Result<Result<String, Reject>, InvariantViolation> {
        if let Err(r) = self.guard_phase(Phase::Commit) {
            return Ok(Err(r));
        }
        if self.curr_auc_notional >= self.params.q_not {
            return Ok(Err(Reject::AuctionFull));
        }
        if self.blacklist.contains(&proof.serial) {
            return Ok(Err(Reject::Blacklisted));
        }
        if self.client_commits.contains_key(&proof.serial) || self.nullifiers.contains(&proof.serial) {
            return Ok(Err(Reject::SerialUsed));
        }
        if !self.roots.contains(&proof.root) {
            return Ok(Err(Reject::UnknownRoot));
        }
        if !verify_membership(proof, &proof.root, &com.0, &mut self.nullifiers) {
            return Ok(Err(Reject::InvalidProof));
        }
        self.curr_auc_notional = self.curr_auc_notional.saturating_add(self.params.e_client);
        self.client_commits.insert(proof.serial, com);
        if let Some(r) = relayer {
            self.ledger.release(EscrowTag::RelayFee, r, self.params.f_r)?;
        }
        Ok(Ok(String::new()))
    }

    fn commit_mm(&mut self, p: PlayerId, com: Digest) -> Result<Result<String, Reject>, InvariantViolation> {
        if let Err(r) = self.guard_phase(Phase::Commit) {
            return Ok(Err(r));
        }
        if self.mm_commits.contains_key(&p) {
            return Ok(Err(Reject::AlreadyCommitted));
        }
        if self.ledger.balance(p, TokenId::Ref) <= self.e_mm {
            return Ok(Err(Reject::InsufficientFunds));
        }
        self.ledger.escrow(p, EscrowTag::MarketMaker(p), self.e_mm)?;
        self.mm_commits.insert(p, com);
        Ok(Ok(String::new()))
    }

    fn reveal_client(&mut self, p: PlayerId, rev: &ClientReveal) -> Result<Result<String, Reject>, InvariantViolation> {
        if let Err(r) = self.guard_phase(Phase::Reveal) {
            return Ok(Err(r));
        }
        let Some(com) = self.client_commits.get(&rev.s).copied() else {
            return Ok(Err(Reject::UnknownCommitment));
        };
        let reg_id = h(&[&rev.s.0, &rev.r.0]);
        let Some(pos) = self.clients.iter().position(|x| *x == reg_id) else {
            return Ok(Err(Reject::NotRegistered));
        };
        if commit_order(&rev.order) != com {
            return Ok(Err(Reject::CommitmentMismatch));
        }
        let order = rev.order;
        let mut note = String::new();
        if order.price == PriceSpec::Withdraw {
            self.ledger.release(EscrowTag::ClientEscrow, p, self.params.e_client)?;
            note.push_str("withdrawn");
        } else {
            let Some(side) = Side::of_token(order.tkn) else {
                return Ok(Err(Reject::BadOrder("orders sell A or B".into())));
            };
            if let PriceSpec::Limit(lp) = order.price {
                if lp.0 == 0 || lp.0 % self.params.min_tick != 0 {
                    return Ok(Err(Reject::BadOrder("price off the tick grid".into())));
                }
            }
            if self.ledger.balance(p, order.tkn) < order.size {
                return Ok(Err(Reject::InsufficientFunds));
            }
            let cap = match side {
                Side::Buy => div_floor(self.params.e_client, &self.params.p_a)?,
                Side::Sell => {
                    let px = order.price.limit().unwrap_or(self.params.indicative_price);
                    div_floor_priced(self.params.e_client, &self.params.p_a, px.0)
                }
            };
            let size = order.size.min(cap);
            self.ledger.transfer(p, PlayerId::PROTOCOL, order.tkn, size)?;
            let bo = BookOrder {
                id: OrderId(self.next_order_id),
                owner: p,
                size,
                price: order.price,
                width_req: order.width_req,
            };
            self.next_order_id += 1;
            match side {
                Side::Buy => self.buy_orders.push(bo),
                Side::Sell => self.sell_orders.push(bo),
            }
            if size < order.size {
                note.push_str(&format!("size capped to {size}"));
            }
            let stays = match rev.reg_token_new {
                Some(new_id) if self.ledger.balance(p, TokenId::Ref) > self.params.f_r => {
                    self.ledger.escrow(p, EscrowTag::RelayFee, self.params.f_r)?;
                    self.clients.push(new_id);
                    true
                }
                _ => false,
            };
            if !stays {
                self.ledger.release(EscrowTag::ClientEscrow, p, self.params.e_client)?;
            }
        }
        self.clients.remove(pos);
        self.client_commits.remove(&rev.s);
        self.update_root();
        Ok(Ok(note))
    }

    fn reveal_mm(&mut self, p: PlayerId, market: &Market) -> Result<Result<String, Reject>, InvariantViolation> {
        if let Err(r) = self.guard_phase(Phase::Reveal) {
            return Ok(Err(r));
        }
        let Some(com) = self.mm_commits.get(&p).copied() else {
            return Ok(Err(Reject::UnknownCommitment));
        };
        if commit_market(market) != com {
            return Ok(Err(Reject::CommitmentMismatch));
        }
        if let Err(m) = market_ok(&self.params, &self.ledger, p, market) {
            return Ok(Err(Reject::BadMarket(m)));
        }
        self.revealed_mkts.push((p, *market));
        self.mm_commits.remove(&p);
        Ok(Ok(String::new()))
    }

    fn end_reveal_phase(&mut self, height: u64) -> Result<String, InvariantViolation> {
        let revealed = std::mem::take(&mut self.revealed_mkts);
        let params = &self.params;
        let ledger = &self.ledger;
        self.tight = auction::select_tight_market(&revealed, |mm, m| market_ok(params, ledger, mm, m).is_ok());
        let mut kept = Vec::new();
        for (mm, m) in revealed {
            if market_ok(&self.params, &self.ledger, mm, &m).is_ok() {
                self.ledger.release(EscrowTag::MarketMaker(mm), mm, self.e_mm)?;
                kept.push((mm, m));
            } else {
                self.ledger.burn_escrow(EscrowTag::MarketMaker(mm), self.e_mm)?;
                self.burned.push(BurnRecord { account: mm.to_string(), amount: self.e_mm });
            }
        }
        self.revealed_mkts = kept;
        for mm in std::mem::take(&mut self.mm_commits).into_keys() {
            self.ledger.burn_escrow(EscrowTag::MarketMaker(mm), self.e_mm)?;
            self.burned.push(BurnRecord { account: mm.to_string(), amount: self.e_mm });
        }
        for s in std::mem::take(&mut self.client_commits).into_keys() {
            self.blacklist.insert(s);
            self.blacklisted_now.push(s);
            self.ledger.burn_escrow(EscrowTag::ClientEscrow, self.params.e_client)?;
            self.burned.push(BurnRecord { account: s.to_hex(), amount: self.params.e_client });
        }
        let mut note = String::from("no tight market");
        if let Some((mm, m)) = self.tight {
            self.w_tight = m.width();
            let bid_size = m.size_bid.min(div_floor(self.e_mm, &self.params.p_a)?);
            let offer_size = m.size_offer.min(div_floor_priced(self.e_mm, &self.params.p_a, m.offer.0));
            self.ledger.transfer(mm, PlayerId::PROTOCOL, TokenId::A, bid_size)?;
            self.ledger.transfer(mm, PlayerId::PROTOCOL, TokenId::B, offer_size)?;
            for (side, price, size) in [(Side::Buy, m.bid, bid_size), (Side::Sell, m.offer, offer_size)] {
                let bo = BookOrder {
                    id: OrderId(self.next_order_id),
                    owner: mm,
                    size,
                    price: PriceSpec::Limit(price),
                    width_req: Width::Any,
                };
                self.next_order_id += 1;
                match side {
                    Side::Buy => self.buy_orders.push(bo),
                    Side::Sell => self.sell_orders.push(bo),
                }
            }
            note = format!("tight market {}@{} from {mm}, width {}", m.bid.0, m.offer.0, self.w_tight);
        }
        self.phase = Some(Phase::Resolution);
        self.last_phase_change = height;
        Ok(note)
    }

    fn resolve(
        &mut self,
        p: PlayerId,
        claim: &CpClaim,
        height: u64,
    ) -> Result<Result<(String, Option<SettlementReport>), Reject>, InvariantViolation> {
        if let Err(r) = self.guard_phase(Phase::Resolution) {
            return Ok(Err(r));
        }
        let bounty = self.params.res_bounty;
        if self.ledger.balance(p, TokenId::Ref) <= bounty {
            return Ok(Err(Reject::InsufficientFunds));
        }
        self.ledger.escrow(p, EscrowTag::Treasury, bounty)?;
        let (book, removed) = self.book().filter_by_width();
        let valid = match claim {
            CpClaim::Price(c) => verify_clearing_price(&book, c),
            CpClaim::NoCross => verify_no_cross(&book),
        };
        if !valid {
            return Ok(Ok(("claim rejected, deposit forfeited".into(), None)));
        }
        let result = match claim {
            CpClaim::Price(c) => auction::settle(&book, c)?,
            CpClaim::NoCross => auction::settle_no_cross(&book)?,
        };
        let mut fills = result.fills.clone();
        fills.extend(removed.iter().map(|(side, o)| Fill::unexecuted(o, *side)));
        for f in &fills {
            self.ledger.transfer(PlayerId::PROTOCOL, f.owner, f.side.sold(), f.refunded)?;
            self.ledger.transfer(PlayerId::PROTOCOL, f.owner, f.side.bought(), f.received)?;
        }
        let paid = (2 * bounty).min(self.ledger.escrow_of(EscrowTag::Treasury));
        self.ledger.release(EscrowTag::Treasury, p, paid)?;
        let report = SettlementReport {
            round: self.round,
            height,
            cp: result.cp,
            volume_b: result.volume_b,
            imbalance_a: result.imbalance_a,
            w_tight: self.w_tight,
            tight_mm: self.tight.map(|t| t.0),
            fills,
            width_filtered: removed.iter().map(|(_, o)| o.id).collect(),
            burned: std::mem::take(&mut self.burned),
            blacklisted: std::mem::take(&mut self.blacklisted_now),
            bounty_winner: p,
            bounty_paid: paid,
        };
        self.buy_orders.clear();
        self.sell_orders.clear();
        self.revealed_mkts.clear();
        self.client_commits.clear();
        self.mm_commits.clear();
        self.curr_auc_notional = 0;
        self.w_tight = Width::Any;
        self.tight = None;
        self.phase = Some(Phase::Commit);
        self.last_phase_change = height;
        self.round += 1;
        let note = match report.cp {
            Some(cp) => format!("settled at {} for {} B", cp.0, report.volume_b),
            None => "settled without trade".to_string(),
        };
        Ok(Ok((note, Some(report))))
    }

    /// Deadline handling at the end of block `height`.
    pub fn end_block(&mut self, height: u64) -> Result<Vec<PhaseChange>, InvariantViolation> {
        let mut out = Vec::new();
        loop {
            match self.phase {
                Some(Phase::Commit) if height >= self.last_phase_change + self.t_eff => {
                    self.phase = Some(Phase::Reveal);
                    self.last_phase_change = height;
                    let note = format!("{} client and {} market maker commitments", self.client_commits.len(), self.mm_commits.len());
                    out.push(PhaseChange { from: Phase::Commit, to: Phase::Reveal, note });
                }
                Some(Phase::Reveal)
                    if height >= self.last_phase_change + self.t_eff
                        || (self.client_commits.is_empty() && self.mm_commits.is_empty()) =>
                {
                    let note = self.end_reveal_phase(height)?;
                    out.push(PhaseChange { from: Phase::Reveal, to: Phase::Resolution, note });
                }
                _ => break,
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::TxHandle;
    use crate::membership::{gen_secret, prove_membership, Secret};
    use crate::model::Price;
    use num_rational::Ratio;

    const MM: PlayerId = PlayerId(10);
    const C1: PlayerId = PlayerId(1);
    const HUNTER: PlayerId = PlayerId(20);
    const RELAYER: PlayerId = PlayerId(30);

    fn params() -> ProtocolParams {
        ProtocolParams {
            e_client: 1000,
            q_not: 3000,
            c: Ratio::new(3, 2),
            f_r: 5,
            res_bounty: 50,
            min_tick: 1,
            p_a: Ratio::from_integer(1),
            t: 2,
            alpha: Ratio::from_integer(0),
            f_mcf: Ratio::new(121, 100),
            delta: Ratio::from_integer(1),
            indicative_price: Price(100),
        }
    }

    fn setup() -> Protocol {
        let mut l = Ledger::new();
        for p in [C1, PlayerId(2), MM, HUNTER] {
            l.mint(p, TokenId::Ref, 100_000).unwrap();
            l.mint(p, TokenId::A, 1_000_000).unwrap();
            l.mint(p, TokenId::B, 10_000).unwrap();
        }
        l.escrow(HUNTER, EscrowTag::Treasury, 1000).unwrap();
        let mut pr = Protocol::new(params(), l).unwrap();
        pr.initialise(0);
        pr
    }

    fn inc(sender: Sender, body: TxBody, height: u64) -> Included {
        Included {
            handle: TxHandle(0),
            tx: crate::chain::Tx { sender, body },
            submit_height: height,
            height,
            relayer: matches!(sender, Sender::Relayed).then_some(RELAYER),
        }
    }

    fn run(pr: &mut Protocol, sender: Sender, body: TxBody, height: u64) -> Outcome {
        let r = pr.execute(&inc(sender, body, height)).unwrap();
        pr.check_invariants().unwrap();
        r.outcome
    }

    fn register(pr: &mut Protocol, who: PlayerId, seed: u64) -> Secret {
        let s = gen_secret(seed);
        assert!(matches!(run(pr, Sender::Player(who), TxBody::Register { reg_id: s.reg_id() }, 0), Outcome::Applied(_)));
        s
    }

    fn commit(pr: &mut Protocol, s: &Secret, order: &Order, height: u64) -> Outcome {
        let com = commit_order(order);
        let proof = prove_membership(s, pr.clients(), &com.0).unwrap();
        run(pr, Sender::Relayed, TxBody::CommitClient { com, proof }, height)
    }

    fn mkt_buy(size: u64) -> Order {
        Order { tkn: TokenId::A, size, price: PriceSpec::Mkt, width_req: "1.21".parse().unwrap() }
    }

    #[test]
    fn register_needs_strictly_more_than_escrow() {
        let mut l = Ledger::new();
        l.mint(C1, TokenId::Ref, 1005).unwrap();
        let mut pr = Protocol::new(params(), l).unwrap();
        let s = gen_secret(1);
        assert_eq!(run(&mut pr, Sender::Player(C1), TxBody::Register { reg_id: s.reg_id() }, 0), Outcome::Rejected(Reject::InsufficientFunds));
    }

    #[test]
    fn duplicate_registration_flagged() {
        let mut pr = setup();
        let s = register(&mut pr, C1, 1);
        let out = run(&mut pr, Sender::Player(C1), TxBody::Register { reg_id: s.reg_id() }, 0);
        assert_eq!(out, Outcome::Applied("duplicate registration".into()));
        assert_eq!(pr.clients().len(), 2);
    }

    #[test]
    fn commit_pays_relayer_and_rejects_reuse() {
        let mut pr = setup();
        let s = register(&mut pr, C1, 1);
        assert_eq!(commit(&mut pr, &s, &mkt_buy(100), 1), Outcome::Applied(String::new()));
        assert_eq!(pr.ledger.balance(RELAYER, TokenId::Ref), 5);
        assert_eq!(pr.curr_auc_notional(), 1000);
        assert_eq!(commit(&mut pr, &s, &mkt_buy(100), 1), Outcome::Rejected(Reject::SerialUsed));
    }

    #[test]
    fn auction_full_gate() {
        let mut pr = setup();
        let secrets: Vec<Secret> = (0..4).map(|i| register(&mut pr, C1, i)).collect();
        for s in &secrets[..3] {
            assert_eq!(commit(&mut pr, s, &mkt_buy(1), 1), Outcome::Applied(String::new()));
        }
        assert_eq!(commit(&mut pr, &secrets[3], &mkt_buy(1), 1), Outcome::Rejected(Reject::AuctionFull));
    }

    #[test]
    fn phase_guards() {
        let mut pr = setup();
        let s = register(&mut pr, C1, 1);
        let rev = ClientReveal { s: s.s, r: s.r, order: mkt_buy(1), reg_token_new: None };
        assert_eq!(
            run(&mut pr, Sender::Player(C1), TxBody::RevealClient(rev), 1),
            Outcome::Rejected(Reject::WrongPhase { phase: Phase::Commit })
        );
        assert_eq!(
            run(&mut pr, Sender::Player(HUNTER), TxBody::Cp(CpClaim::NoCross), 1),
            Outcome::Rejected(Reject::WrongPhase { phase: Phase::Commit })
        );
        assert_eq!(run(&mut pr, Sender::Relayed, TxBody::Cp(CpClaim::NoCross), 1), Outcome::Rejected(Reject::WrongSender));
    }

    #[test]
    fn empty_round_early_exit_and_no_cross() {
        let mut pr = setup();
        let ch = pr.end_block(2).unwrap();
        assert_eq!(ch.len(), 2);
        assert_eq!(pr.phase(), Some(Phase::Resolution));
        let r = pr.execute(&inc(Sender::Player(HUNTER), TxBody::Cp(CpClaim::NoCross), 3)).unwrap();
        let rep = r.settlement.unwrap();
        assert_eq!(rep.cp, None);
        assert_eq!(pr.phase(), Some(Phase::Commit));
        assert_eq!(pr.round(), 2);
    }

    #[test]
    fn full_round_with_market_maker() {
        let mut pr = setup();
        let s = register(&mut pr, C1, 1);
        let m = Market::new(Price(100), 3000, Price(110), 30).unwrap();
        assert_eq!(commit(&mut pr, &s, &mkt_buy(550), 1), Outcome::Applied(String::new()));
        assert_eq!(run(&mut pr, Sender::Player(MM), TxBody::CommitMm { com: commit_market(&m) }, 1), Outcome::Applied(String::new()));
        pr.end_block(2).unwrap();
        assert_eq!(pr.phase(), Some(Phase::Reveal));
        let rev = ClientReveal { s: s.s, r: s.r, order: mkt_buy(550), reg_token_new: None };
        assert!(matches!(run(&mut pr, Sender::Player(C1), TxBody::RevealClient(rev), 3), Outcome::Applied(_)));
        assert!(matches!(run(&mut pr, Sender::Player(MM), TxBody::RevealMm { market: m }, 3), Outcome::Applied(_)));
        pr.end_block(3).unwrap();
        assert_eq!(pr.phase(), Some(Phase::Resolution));
        pr.check_invariants().unwrap();
        assert_eq!(pr.w_tight(), Width::Finite(Ratio::new(11, 10)));
        let (book, removed) = pr.book().filter_by_width();
        assert!(removed.is_empty());
        let claim = auction::find_clearing_price(&book).unwrap().unwrap();
        assert_eq!(claim.cp, Price(110));
        assert_eq!(claim.volume_b, 5);
        let bad = CpClaim::Price(auction::ClearingClaim { cp: Price(109), ..claim });
        let r = pr.execute(&inc(Sender::Player(HUNTER), TxBody::Cp(bad), 4)).unwrap();
        assert!(r.settlement.is_none());
        assert_eq!(pr.phase(), Some(Phase::Resolution));
        let before = pr.ledger.balance(HUNTER, TokenId::Ref);
        let r = pr.execute(&inc(Sender::Player(HUNTER), TxBody::Cp(CpClaim::Price(claim)), 4)).unwrap();
        let rep = r.settlement.unwrap();
        rep.check().unwrap();
        assert_eq!(pr.ledger.balance(HUNTER, TokenId::Ref), before + 50);
        assert_eq!(pr.ledger.balance(C1, TokenId::B), 10_005);
        assert_eq!(pr.ledger.balance(C1, TokenId::A), 1_000_000 - 550);
        pr.check_invariants().unwrap();
    }

    #[test]
    fn silent_parties_are_burned_and_blacklisted() {
        let mut pr = setup();
        let s = register(&mut pr, C1, 1);
        let m = Market::new(Price(100), 3000, Price(110), 30).unwrap();
        commit(&mut pr, &s, &mkt_buy(10), 1);
        run(&mut pr, Sender::Player(MM), TxBody::CommitMm { com: commit_market(&m) }, 1);
        pr.end_block(2).unwrap();
        pr.end_block(4).unwrap();
        assert_eq!(pr.phase(), Some(Phase::Resolution));
        assert!(pr.is_blacklisted(&s.s));
        assert_eq!(pr.ledger.balance(PlayerId::BURN, TokenId::Ref), 1000 + 4500);
        pr.check_invariants().unwrap();
    }

    #[test]
    fn size_cap_on_reveal() {
        let mut pr = setup();
        let s = register(&mut pr, C1, 1);
        let big = Order { tkn: TokenId::B, size: 50, price: PriceSpec::Limit(Price(40)), width_req: Width::Any };
        commit(&mut pr, &s, &big, 1);
        pr.end_block(2).unwrap();
        let rev = ClientReveal { s: s.s, r: s.r, order: big, reg_token_new: None };
        let out = run(&mut pr, Sender::Player(C1), TxBody::RevealClient(rev), 3);
        assert_eq!(out, Outcome::Applied("size capped to 25".into()));
        assert_eq!(pr.book().sell_orders[0].size, 25);
    }

    #[test]
    fn reveal_with_new_token_keeps_escrow() {
        let mut pr = setup();
        let s = register(&mut pr, C1, 1);
        commit(&mut pr, &s, &mkt_buy(10), 1);
        pr.end_block(2).unwrap();
        let next = gen_secret(2);
        let rev = ClientReveal { s: s.s, r: s.r, order: mkt_buy(10), reg_token_new: Some(next.reg_id()) };
        let before = pr.ledger.balance(C1, TokenId::Ref);
        run(&mut pr, Sender::Player(C1), TxBody::RevealClient(rev), 3);
        assert_eq!(pr.ledger.balance(C1, TokenId::Ref), before - 5);
        assert_eq!(pr.clients(), &[next.reg_id()]);
    }

    #[test]
    fn withdraw_returns_escrow() {
        let mut pr = setup();
        let s = register(&mut pr, C1, 1);
        let w = Order { tkn: TokenId::A, size: 0, price: PriceSpec::Withdraw, width_req: Width::Any };
        commit(&mut pr, &s, &w, 1);
        pr.end_block(2).unwrap();
        let before = pr.ledger.balance(C1, TokenId::Ref);
        let rev = ClientReveal { s: s.s, r: s.r, order: w, reg_token_new: None };
        assert_eq!(run(&mut pr, Sender::Player(C1), TxBody::RevealClient(rev), 3), Outcome::Applied("withdrawn".into()));
        assert_eq!(pr.ledger.balance(C1, TokenId::Ref), before + 1000);
        assert!(pr.book().buy_orders.is_empty());
    }
}
