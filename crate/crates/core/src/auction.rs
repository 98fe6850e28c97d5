//! Width-filtered uniform-price batch auction: tight-market selection,
//! clearing-price search, the local clearing-price verifier and settlement.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{h, Digest};
use crate::model::{Market, OrderId, PlayerId, Price, PriceSpec, Quantity, Side, Width};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuctionError {
    #[error("clearing price claim does not verify")]
    InvalidClearingPrice,
    #[error("arithmetic overflow in book evaluation")]
    Overflow,
    #[error("invalid book: {0}")]
    InvalidBook(String),
}

/// An order resting in the auction book. Buy orders are sized in A, sell orders in B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BookOrder {
    pub id: OrderId,
    pub owner: PlayerId,
    pub size: Quantity,
    pub price: PriceSpec,
    pub width_req: Width,
}

fn default_tick() -> u64 {
    1
}

fn default_width() -> Width {
    Width::Any
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuctionBook {
    #[serde(default)]
    pub buy_orders: Vec<BookOrder>,
    #[serde(default)]
    pub sell_orders: Vec<BookOrder>,
    #[serde(default = "default_width")]
    pub w_tight: Width,
    #[serde(default = "default_tick")]
    pub min_tick: u64,
}

/// A proposed clearing price with the volume and imbalance it implies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearingClaim {
    pub cp: Price,
    /// Traded B atoms.
    pub volume_b: Quantity,
    /// `buyVol_A - sellVol_B * cp`, in A atoms.
    pub imbalance_a: i128,
}

/// Volumes of a book at one price.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evaluation {
    pub cp: u64,
    pub buy_a: u128,
    pub sell_b: u128,
    pub volume_b: u128,
    pub imbalance_a: i128,
}

/// Settlement of one order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fill {
    pub order_id: OrderId,
    pub owner: PlayerId,
    pub side: Side,
    /// Amount of the sold token placed in escrow.
    pub deposited: Quantity,
    /// Amount of the sold token delivered.
    pub executed: Quantity,
    /// Amount of the bought token received.
    pub received: Quantity,
    pub refunded: Quantity,
}

impl Fill {
    pub fn unexecuted(o: &BookOrder, side: Side) -> Fill {
        Fill { order_id: o.id, owner: o.owner, side, deposited: o.size, executed: 0, received: 0, refunded: o.size }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearingResult {
    /// `None` when nothing crosses and everything is refunded.
    pub cp: Option<Price>,
    pub volume_b: Quantity,
    pub imbalance_a: i128,
    pub fills: Vec<Fill>,
}

impl ClearingResult {
    /// Exact conservation across fills.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut spent_a = 0u128;
        let mut got_b = 0u128;
        let mut sold_b = 0u128;
        let mut got_a = 0u128;
        let mut ids = BTreeSet::new();
        for f in &self.fills {
            if !ids.insert(f.order_id) {
                return Err(format!("order {} settled twice", f.order_id.0));
            }
            if f.executed as u128 + f.refunded as u128 != f.deposited as u128 {
                return Err(format!("order {}: executed + refunded != deposited", f.order_id.0));
            }
            match f.side {
                Side::Buy => {
                    spent_a += f.executed as u128;
                    got_b += f.received as u128;
                }
                Side::Sell => {
                    sold_b += f.executed as u128;
                    got_a += f.received as u128;
                }
            }
        }
        let cp = self.cp.map(|p| p.0 as u128).unwrap_or(0);
        let v = self.volume_b as u128;
        if self.cp.is_none() && v != 0 {
            return Err("volume without a clearing price".into());
        }
        if spent_a != got_a || spent_a != v * cp {
            return Err(format!("A flow mismatch: buyers spent {spent_a}, sellers got {got_a}, expected {}", v * cp));
        }
        if got_b != sold_b || got_b != v {
            return Err(format!("B flow mismatch: buyers got {got_b}, sellers sold {sold_b}, expected {v}"));
        }
        Ok(())
    }
}

fn buy_eligible(o: &BookOrder, cp: u64) -> bool {
    match o.price {
        PriceSpec::Mkt => true,
        PriceSpec::Limit(p) => p.0 >= cp,
        PriceSpec::Withdraw => false,
    }
}

fn sell_eligible(o: &BookOrder, cp: u64) -> bool {
    match o.price {
        PriceSpec::Mkt => true,
        PriceSpec::Limit(p) => p.0 <= cp,
        PriceSpec::Withdraw => false,
    }
}

impl AuctionBook {
    pub fn validate(&self) -> Result<(), AuctionError> {
        if self.min_tick == 0 {
            return Err(AuctionError::InvalidBook("min_tick must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        for side in [&self.buy_orders, &self.sell_orders] {
            let mut total: u64 = 0;
            for o in side {
                if !ids.insert(o.id) {
                    return Err(AuctionError::InvalidBook(format!("duplicate order id {}", o.id.0)));
                }
                match o.price {
                    PriceSpec::Withdraw => {
                        return Err(AuctionError::InvalidBook(format!("order {} is a withdrawal", o.id.0)))
                    }
                    PriceSpec::Limit(p) if p.0 == 0 || p.0 % self.min_tick != 0 => {
                        return Err(AuctionError::InvalidBook(format!("order {} price off the tick grid", o.id.0)))
                    }
                    _ => {}
                }
                total = total.checked_add(o.size).ok_or(AuctionError::Overflow)?;
            }
        }
        Ok(())
    }

    /// Keeps orders whose width requirement admits the tight market. With no
    /// tight market every order is kept.
    pub fn filter_by_width(&self) -> (AuctionBook, Vec<(Side, BookOrder)>) {
        let keep = |o: &BookOrder| self.w_tight.is_any() || o.width_req.is_any() || o.width_req >= self.w_tight;
        let mut removed = Vec::new();
        let mut split = |orders: &[BookOrder], side: Side| {
            let mut kept = Vec::new();
            for o in orders {
                if keep(o) {
                    kept.push(*o);
                } else {
                    removed.push((side, *o));
                }
            }
            kept
        };
        let buy_orders = split(&self.buy_orders, Side::Buy);
        let sell_orders = split(&self.sell_orders, Side::Sell);
        (AuctionBook { buy_orders, sell_orders, w_tight: self.w_tight, min_tick: self.min_tick }, removed)
    }

    /// `(buyVol_A, sellVol_B)` at `cp`.
    pub fn volumes_at(&self, cp: u64) -> (u128, u128) {
        let buy = self.buy_orders.iter().filter(|o| buy_eligible(o, cp)).map(|o| o.size as u128).sum();
        let sell = self.sell_orders.iter().filter(|o| sell_eligible(o, cp)).map(|o| o.size as u128).sum();
        (buy, sell)
    }

    pub fn evaluate(&self, cp: u64) -> Result<Evaluation, AuctionError> {
        if cp == 0 {
            return Err(AuctionError::InvalidClearingPrice);
        }
        let (buy_a, sell_b) = self.volumes_at(cp);
        Ok(evaluation(cp, buy_a, sell_b)?)
    }
}

fn evaluation(cp: u64, buy_a: u128, sell_b: u128) -> Result<Evaluation, AuctionError> {
    let volume_b = (buy_a / cp as u128).min(sell_b);
    let sell_a = sell_b.checked_mul(cp as u128).ok_or(AuctionError::Overflow)?;
    let imbalance_a = i128::try_from(buy_a).map_err(|_| AuctionError::Overflow)?
        - i128::try_from(sell_a).map_err(|_| AuctionError::Overflow)?;
    Ok(Evaluation { cp, buy_a, sell_b, volume_b, imbalance_a })
}

/// Max volume, then min |imbalance|, then lowest price.
fn better(a: &Evaluation, b: &Evaluation) -> bool {
    (a.volume_b, std::cmp::Reverse(a.imbalance_a.unsigned_abs()), std::cmp::Reverse(a.cp))
        > (b.volume_b, std::cmp::Reverse(b.imbalance_a.unsigned_abs()), std::cmp::Reverse(b.cp))
}

/// Exact search for the clearing price on the tick grid.
///
/// Volumes are piecewise constant between limit prices. On a constant piece
/// with buy volume `B` and sell volume `S` the traded volume is `S` up to
/// `B / S` and falls after, while the imbalance shrinks towards `B / S`, so
/// each piece has a single best candidate.
pub fn find_clearing_price(book: &AuctionBook) -> Result<Option<ClearingClaim>, AuctionError> {
    book.validate()?;
    let t = book.min_tick;
    let mut points = BTreeSet::from([t]);
    for o in book.buy_orders.iter().chain(&book.sell_orders) {
        if let PriceSpec::Limit(p) = o.price {
            points.insert(p.0);
            points.insert(p.0.checked_add(t).ok_or(AuctionError::Overflow)?);
        }
    }
    let points: Vec<u64> = points.into_iter().collect();
    let mut best: Option<Evaluation> = None;
    for (k, &lo) in points.iter().enumerate() {
        let hi = points.get(k + 1).map(|n| n - t);
        let (buy_a, sell_b) = book.volumes_at(lo);
        if buy_a == 0 || sell_b == 0 {
            continue;
        }
        let pivot = buy_a / sell_b;
        let pivot = u64::try_from(pivot).unwrap_or(u64::MAX) / t * t;
        let mut cand = pivot.max(lo);
        if let Some(hi) = hi {
            cand = cand.min(hi);
        }
        let e = evaluation(cand, buy_a, sell_b)?;
        if e.volume_b == 0 {
            continue;
        }
        if best.as_ref().map_or(true, |b| better(&e, b)) {
            best = Some(e);
        }
    }
    best.map(|e| {
        Ok(ClearingClaim {
            cp: Price(e.cp),
            volume_b: u64::try_from(e.volume_b).map_err(|_| AuctionError::Overflow)?,
            imbalance_a: e.imbalance_a,
        })
    })
    .transpose()
}

/// Local verifier: recomputes the claim at `cp` and checks only the
/// neighbouring tick in the direction of the imbalance.
pub fn verify_clearing_price(book: &AuctionBook, claim: &ClearingClaim) -> bool {
    if book.validate().is_err() {
        return false;
    }
    let t = book.min_tick;
    let cp = claim.cp.0;
    if cp == 0 || cp % t != 0 {
        return false;
    }
    let Ok(here) = book.evaluate(cp) else { return false };
    if here.volume_b == 0 || here.volume_b != claim.volume_b as u128 || here.imbalance_a != claim.imbalance_a {
        return false;
    }
    let next = match here.imbalance_a.signum() {
        0 => return true,
        1 => match cp.checked_add(t) {
            Some(n) => n,
            None => return true,
        },
        _ => {
            if cp <= t {
                return true;
            }
            cp - t
        }
    };
    let Ok(there) = book.evaluate(next) else { return false };
    there.volume_b < here.volume_b
        || (there.volume_b == here.volume_b && here.imbalance_a.unsigned_abs() <= there.imbalance_a.unsigned_abs())
}

/// True iff no price on the grid trades a positive volume. Volume needs some
/// sell at `cp`, which first happens at the lowest sell limit, and buy volume
/// only falls as `cp` rises, so that single price decides.
pub fn verify_no_cross(book: &AuctionBook) -> bool {
    if book.validate().is_err() {
        return false;
    }
    let lowest_sell = book
        .sell_orders
        .iter()
        .filter(|o| o.size > 0)
        .map(|o| match o.price {
            PriceSpec::Limit(p) => p.0,
            _ => book.min_tick,
        })
        .min();
    match lowest_sell {
        None => true,
        Some(p) => book.volumes_at(p).0 < p as u128,
    }
}

/// Splits `total` over `weights` by floor pro-rata, then hands the leftover
/// units out by largest remainder, ties to the lower order id.
pub fn allocate_pro_rata(weights: &[(OrderId, u128)], total: u128) -> Vec<u128> {
    let sum: u128 = weights.iter().map(|w| w.1).sum();
    if sum == 0 || total == 0 {
        return vec![0; weights.len()];
    }
    assert!(total <= sum, "pro-rata total exceeds weights");
    let mut shares = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (i, &(id, w)) in weights.iter().enumerate() {
        // total <= sum and both fit u64 sums, so w * total stays below 2^128.
        let prod = w * total;
        shares.push(prod / sum);
        rems.push((prod % sum, id, i));
    }
    let left = total - shares.iter().sum::<u128>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, _, i) in rems.iter().take(left as usize) {
        shares[i] += 1;
    }
    shares
}

/// Price-priority fill of `budget` units: market orders first, then limit
/// levels from most to least aggressive. The marginal level is pro-rated.
fn priority_fill(orders: &[&BookOrder], budget: u128, side: Side) -> Vec<u128> {
    let key = |o: &BookOrder| match (o.price, side) {
        (PriceSpec::Limit(p), Side::Buy) => Some(std::cmp::Reverse(p.0)),
        (PriceSpec::Limit(p), Side::Sell) => Some(std::cmp::Reverse(u64::MAX - p.0)),
        _ => None,
    };
    let mut levels: Vec<Option<std::cmp::Reverse<u64>>> = orders.iter().map(|o| key(o)).collect();
    levels.sort();
    levels.dedup();
    let mut out = vec![0u128; orders.len()];
    let mut left = budget;
    for lvl in levels {
        if left == 0 {
            break;
        }
        let idx: Vec<usize> = (0..orders.len()).filter(|&i| key(orders[i]) == lvl).collect();
        let level_sum: u128 = idx.iter().map(|&i| orders[i].size as u128).sum();
        if level_sum <= left {
            for &i in &idx {
                out[i] = orders[i].size as u128;
            }
            left -= level_sum;
        } else {
            let w: Vec<(OrderId, u128)> = idx.iter().map(|&i| (orders[i].id, orders[i].size as u128)).collect();
            for (k, s) in allocate_pro_rata(&w, left).into_iter().enumerate() {
                out[idx[k]] = s;
            }
            left = 0;
        }
    }
    out
}

/// Settles a verified claim. Buyers spend `volume * cp` A in total and share
/// the `volume` B in proportion to their spend; sellers deliver `volume` B and
/// each receives `delivered * cp` A.
pub fn settle(book: &AuctionBook, claim: &ClearingClaim) -> Result<ClearingResult, AuctionError> {
    if !verify_clearing_price(book, claim) {
        return Err(AuctionError::InvalidClearingPrice);
    }
    settle_at(book, claim.cp)
}

/// Settles at `cp` without checking that `cp` is optimal. Needs positive volume.
pub fn settle_at(book: &AuctionBook, cp: Price) -> Result<ClearingResult, AuctionError> {
    book.validate()?;
    let e = book.evaluate(cp.0)?;
    if e.volume_b == 0 {
        return Err(AuctionError::InvalidClearingPrice);
    }
    let claim = ClearingClaim {
        cp,
        volume_b: u64::try_from(e.volume_b).map_err(|_| AuctionError::Overflow)?,
        imbalance_a: e.imbalance_a,
    };
    let cp = claim.cp.0;
    let v = claim.volume_b as u128;
    let to_q = |x: u128| u64::try_from(x).map_err(|_| AuctionError::Overflow);

    let buys: Vec<&BookOrder> = book.buy_orders.iter().filter(|o| buy_eligible(o, cp)).collect();
    let spend = priority_fill(&buys, v * cp as u128, Side::Buy);
    let weights: Vec<(OrderId, u128)> = buys.iter().zip(&spend).map(|(o, s)| (o.id, *s)).collect();
    let got_b = allocate_pro_rata(&weights, v);

    let sells: Vec<&BookOrder> = book.sell_orders.iter().filter(|o| sell_eligible(o, cp)).collect();
    let delivered = priority_fill(&sells, v, Side::Sell);

    let mut fills = Vec::with_capacity(book.buy_orders.len() + book.sell_orders.len());
    let mut k = 0;
    for o in &book.buy_orders {
        if buy_eligible(o, cp) {
            let executed = to_q(spend[k])?;
            fills.push(Fill {
                order_id: o.id,
                owner: o.owner,
                side: Side::Buy,
                deposited: o.size,
                executed,
                received: to_q(got_b[k])?,
                refunded: o.size - executed,
            });
            k += 1;
        } else {
            fills.push(Fill::unexecuted(o, Side::Buy));
        }
    }
    let mut k = 0;
    for o in &book.sell_orders {
        if sell_eligible(o, cp) {
            let executed = to_q(delivered[k])?;
            fills.push(Fill {
                order_id: o.id,
                owner: o.owner,
                side: Side::Sell,
                deposited: o.size,
                executed,
                received: to_q(delivered[k] * cp as u128)?,
                refunded: o.size - executed,
            });
            k += 1;
        } else {
            fills.push(Fill::unexecuted(o, Side::Sell));
        }
    }
    Ok(ClearingResult { cp: Some(claim.cp), volume_b: claim.volume_b, imbalance_a: claim.imbalance_a, fills })
}

/// Refunds every order of a book that does not cross.
pub fn settle_no_cross(book: &AuctionBook) -> Result<ClearingResult, AuctionError> {
    if !verify_no_cross(book) {
        return Err(AuctionError::InvalidClearingPrice);
    }
    let fills = book
        .buy_orders
        .iter()
        .map(|o| Fill::unexecuted(o, Side::Buy))
        .chain(book.sell_orders.iter().map(|o| Fill::unexecuted(o, Side::Sell)))
        .collect();
    Ok(ClearingResult { cp: None, volume_b: 0, imbalance_a: 0, fills })
}

/// Seed for tie-breaking, computed over every revealed market.
pub fn tie_break_seed(revealed: &[(PlayerId, Market)]) -> Digest {
    let mut buf = Vec::with_capacity(revealed.len() * 36);
    for (mm, m) in revealed {
        buf.extend_from_slice(&mm.to_bytes());
        buf.extend_from_slice(&m.encode());
    }
    h(&[b"tie-seed", &buf])
}

pub fn tie_break_digest(seed: &Digest, mm: PlayerId, m: &Market) -> Digest {
    h(&[&seed.0, &mm.to_bytes(), &m.encode()])
}

/// Picks the tightest market among those passing `still_valid`. Ties go to
/// the largest tie-break digest, read as a big-endian integer.
pub fn select_tight_market<F>(revealed: &[(PlayerId, Market)], mut still_valid: F) -> Option<(PlayerId, Market)>
where
    F: FnMut(PlayerId, &Market) -> bool,
{
    let seed = tie_break_seed(revealed);
    let mut best: Option<(Width, Digest, PlayerId, Market)> = None;
    for (mm, m) in revealed {
        if m.validate().is_err() || !still_valid(*mm, m) {
            continue;
        }
        let w = m.width();
        let d = tie_break_digest(&seed, *mm, m);
        let wins = match &best {
            None => true,
            Some((bw, bd, _, _)) => w < *bw || (w == *bw && d > *bd),
        };
        if wins {
            best = Some((w, d, *mm, *m));
        }
    }
    best.map(|(_, _, mm, m)| (mm, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(id: u64, size: u64, price: PriceSpec) -> BookOrder {
        BookOrder { id: OrderId(id), owner: PlayerId(id as u32 + 1), size, price, width_req: Width::Any }
    }

    fn lim(p: u64) -> PriceSpec {
        PriceSpec::Limit(Price(p))
    }

    fn book(buys: Vec<BookOrder>, sells: Vec<BookOrder>) -> AuctionBook {
        AuctionBook { buy_orders: buys, sell_orders: sells, w_tight: Width::Any, min_tick: 1 }
    }

    #[test]
    fn symmetric_market_orders() {
        let b = book(vec![o(1, 100, PriceSpec::Mkt)], vec![o(2, 1, PriceSpec::Mkt)]);
        let c = find_clearing_price(&b).unwrap().unwrap();
        assert_eq!(c, ClearingClaim { cp: Price(100), volume_b: 1, imbalance_a: 0 });
        assert!(verify_clearing_price(&b, &c));
    }

    #[test]
    fn market_buy_against_limit_sell() {
        let b = book(vec![o(1, 100, PriceSpec::Mkt)], vec![o(2, 2, lim(40))]);
        let claim = ClearingClaim { cp: Price(40), volume_b: 2, imbalance_a: 20 };
        // cp = 40 is not the search optimum here (50 clears with no imbalance),
        // and the verifier sees that 41 keeps the volume with a smaller imbalance.
        assert!(!verify_clearing_price(&b, &claim));
        assert_eq!(find_clearing_price(&b).unwrap().unwrap().cp, Price(50));
        let r = settle_at(&b, Price(40)).unwrap();
        r.check_invariants().unwrap();
        assert_eq!((r.fills[0].executed, r.fills[0].received, r.fills[0].refunded), (80, 2, 20));
        assert_eq!((r.fills[1].executed, r.fills[1].received, r.fills[1].refunded), (2, 80, 0));
    }

    #[test]
    fn settle_refunds_residual_buy() {
        // One sell at 40 with a second more expensive level that keeps 40 optimal.
        let b = book(vec![o(1, 100, lim(40))], vec![o(2, 2, lim(40))]);
        let c = find_clearing_price(&b).unwrap().unwrap();
        assert_eq!(c, ClearingClaim { cp: Price(40), volume_b: 2, imbalance_a: 20 });
        let r = settle(&b, &c).unwrap();
        r.check_invariants().unwrap();
        assert_eq!((r.fills[0].executed, r.fills[0].received, r.fills[0].refunded), (80, 2, 20));
        assert_eq!((r.fills[1].executed, r.fills[1].received), (2, 80));
    }

    #[test]
    fn pro_rata_largest_remainder() {
        let w = [(OrderId(1), 3), (OrderId(2), 3), (OrderId(3), 4)];
        assert_eq!(allocate_pro_rata(&w, 5), vec![2, 1, 2]);
        assert_eq!(allocate_pro_rata(&w, 10), vec![3, 3, 4]);
        assert_eq!(allocate_pro_rata(&w, 0), vec![0, 0, 0]);
        let lone = [(OrderId(9), 7), (OrderId(4), 7)];
        assert_eq!(allocate_pro_rata(&lone, 1), vec![0, 1]);
    }

    #[test]
    fn empty_and_one_sided_books() {
        let b = book(vec![], vec![]);
        assert_eq!(find_clearing_price(&b).unwrap(), None);
        assert!(verify_no_cross(&b));
        let b = book(vec![o(1, 10, lim(5))], vec![]);
        assert_eq!(find_clearing_price(&b).unwrap(), None);
        assert!(verify_no_cross(&b));
        let b = book(vec![o(1, 10, lim(5))], vec![o(2, 1, lim(6))]);
        assert_eq!(find_clearing_price(&b).unwrap(), None);
        assert!(verify_no_cross(&b));
        let r = settle_no_cross(&b).unwrap();
        r.check_invariants().unwrap();
        assert!(r.fills.iter().all(|f| f.refunded == f.deposited));
    }

    #[test]
    fn crossing_book_is_not_no_cross() {
        let b = book(vec![o(1, 10, lim(5))], vec![o(2, 1, lim(5))]);
        assert!(!verify_no_cross(&b));
        assert!(settle_no_cross(&b).is_err());
    }

    #[test]
    fn claim_mismatch_rejected() {
        let b = book(vec![o(1, 100, PriceSpec::Mkt)], vec![o(2, 1, PriceSpec::Mkt)]);
        assert!(!verify_clearing_price(&b, &ClearingClaim { cp: Price(100), volume_b: 2, imbalance_a: 0 }));
        assert!(!verify_clearing_price(&b, &ClearingClaim { cp: Price(100), volume_b: 1, imbalance_a: 1 }));
        assert!(!verify_clearing_price(&b, &ClearingClaim { cp: Price(0), volume_b: 1, imbalance_a: 100 }));
        assert!(settle(&b, &ClearingClaim { cp: Price(99), volume_b: 1, imbalance_a: 1 }).is_err());
    }

    #[test]
    fn width_filter_rules() {
        let mut b = book(vec![], vec![]);
        b.buy_orders.push(BookOrder { width_req: "1.05".parse().unwrap(), ..o(1, 1, PriceSpec::Mkt) });
        b.buy_orders.push(BookOrder { width_req: "1.1".parse().unwrap(), ..o(2, 1, PriceSpec::Mkt) });
        b.sell_orders.push(o(3, 1, PriceSpec::Mkt));
        b.w_tight = "1.1".parse().unwrap();
        let (kept, removed) = b.filter_by_width();
        assert_eq!(kept.buy_orders.len(), 1);
        assert_eq!(kept.sell_orders.len(), 1);
        assert_eq!(removed.len(), 1);
        assert_eq!(removed[0].1.id, OrderId(1));
        b.w_tight = Width::Any;
        assert!(b.filter_by_width().1.is_empty());
    }

    #[test]
    fn tight_market_selection() {
        let m1 = Market::new(Price(100), 10, Price(110), 10).unwrap();
        let m2 = Market::new(Price(100), 10, Price(105), 10).unwrap();
        let rev = vec![(PlayerId(1), m1), (PlayerId(2), m2)];
        assert_eq!(select_tight_market(&rev, |_, _| true), Some((PlayerId(2), m2)));
        assert_eq!(select_tight_market(&rev, |p, _| p != PlayerId(2)), Some((PlayerId(1), m1)));
        assert_eq!(select_tight_market(&[], |_, _| true), None);
    }

    #[test]
    fn tie_break_uses_largest_digest() {
        let m = Market::new(Price(100), 10, Price(100), 10).unwrap();
        let rev = vec![(PlayerId(1), m), (PlayerId(2), m)];
        let seed = tie_break_seed(&rev);
        let d1 = tie_break_digest(&seed, PlayerId(1), &m);
        let d2 = tie_break_digest(&seed, PlayerId(2), &m);
        let want = if d1 > d2 { PlayerId(1) } else { PlayerId(2) };
        assert_eq!(select_tight_market(&rev, |_, _| true).unwrap().0, want);
        // The seed covers markets removed by re-validation.
        let still = select_tight_market(&rev, |p, _| p == PlayerId(1)).unwrap();
        assert_eq!(still.0, PlayerId(1));
    }

    #[test]
    fn book_json_shape() {
        let js = r#"{"buy_orders":[{"id":1,"owner":"P1","size":100,"price":"mkt","width_req":"any"}],
                     "sell_orders":[{"id":2,"owner":"P2","size":1,"price":90,"width_req":"1.21"}]}"#;
        let b: AuctionBook = serde_json::from_str(js).unwrap();
        assert_eq!(b.min_tick, 1);
        assert_eq!(b.w_tight, Width::Any);
        assert!(serde_json::from_str::<AuctionBook>(r#"{"bogus":1}"#).is_err());
    }
}
