//! Market-maker profit under price impact, client utility, the mid-price
//! process, execution-cost comparisons and best-response checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Side;

pub mod equilibrium;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("notional {0} is not in the impact table")]
    NotionalNotInTable(u64),
    #[error("invalid analysis input: {0}")]
    Invalid(String),
}

/// Profit of a market maker selling to a client buyer of notional `x`.
pub fn mm_profit_buyer_leg(x: f64, y: f64, p_ref: f64, w: f64, delta: f64) -> f64 {
    x / delta.sqrt() - delta.sqrt() * x / w.sqrt() * (y / p_ref)
}

/// Profit of a market maker buying from a client seller of notional `x`.
pub fn mm_profit_seller_leg(x: f64, y: f64, p_ref: f64, w: f64, delta: f64) -> f64 {
    x / delta.sqrt() - delta.sqrt() * x / w.sqrt() * (p_ref / y)
}

/// Expected profit when the client is a buyer or a seller with equal odds.
pub fn mm_expected_profit(x: f64, y: f64, p_ref: f64, w: f64, delta: f64) -> f64 {
    0.5 * mm_profit_buyer_leg(x, y, p_ref, w, delta) + 0.5 * mm_profit_seller_leg(x, y, p_ref, w, delta)
}

/// Grid maximiser of [`mm_expected_profit`] over `p_ref` in `[y/2, 2y]`, step `y/1000`.
pub fn argmax_p_ref(x: f64, y: f64, w: f64, delta: f64) -> f64 {
    let step = y / 1000.0;
    let mut best = (f64::NEG_INFINITY, y / 2.0);
    for k in 0..=1500 {
        let p = y / 2.0 + k as f64 * step;
        let v = mm_expected_profit(x, y, p, w, delta);
        if v > best.0 {
            best = (v, p);
        }
    }
    best.1
}

/// Log-distance utility of a client trade. A buyer gains when paying less
/// than `sqrt(f_mcf) * y`, a seller when receiving more than `y / sqrt(f_mcf)`.
pub fn client_utility(trade_price: f64, y: f64, side: Side, f_mcf: f64) -> f64 {
    let root = f_mcf.sqrt();
    match side {
        Side::Buy => (root * y / trade_price).ln(),
        Side::Sell => (trade_price * root / y).ln(),
    }
}

/// Mid-price process: a buy raises the price by `delta`, a sell lowers it.
#[derive(Debug, Clone)]
pub struct Mifp {
    y: f64,
    delta: f64,
    rng: ChaCha8Rng,
}

impl Mifp {
    pub fn new(y0: f64, delta: f64, seed: u64) -> Mifp {
        Mifp { y: y0, delta, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn apply(&mut self, trade: Option<Side>) -> f64 {
        match trade {
            Some(Side::Buy) => self.y *= self.delta,
            Some(Side::Sell) => self.y /= self.delta,
            None => {}
        }
        self.y
    }

    /// Fair coin for the direction of the next client.
    pub fn random_direction(&mut self) -> Side {
        if self.rng.gen_bool(0.5) {
            Side::Buy
        } else {
            Side::Sell
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Price path starting at `y0`, one entry per trade plus the start.
pub fn run_mifp(y0: f64, delta: f64, trades: &[Option<Side>]) -> Vec<f64> {
    let mut m = Mifp::new(y0, delta, 0);
    let mut out = Vec::with_capacity(trades.len() + 1);
    out.push(y0);
    for t in trades {
        out.push(m.apply(*t));
    }
    out
}

/// Execution venue models compared in the cost table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Venue {
    /// Sealed, anonymous batch auction.
    FairTraDEX,
    /// Constant-function market maker: impact plus slippage allowance.
    Amm,
    /// Batch auction that reveals order direction before execution.
    DirectionRevealing,
    /// Batch auction that reveals trader identity before execution.
    IdentityRevealing,
}

/// `P1` trades once; `P2` is a known repeat trader whose identity leaks intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trader {
    P1,
    P2,
}

pub const STANDARD_SLIPPAGE: f64 = 0.005;

/// Price impact per trade notional.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactTable {
    pub points: Vec<(u64, f64)>,
}

impl ImpactTable {
    pub fn standard() -> ImpactTable {
        ImpactTable { points: vec![(10_000, 0.0), (500_000, 0.0015), (10_000_000, 0.01)] }
    }

    pub fn constant(impact: f64) -> ImpactTable {
        ImpactTable { points: ImpactTable::standard().points.into_iter().map(|(n, _)| (n, impact)).collect() }
    }

    /// Exact lookup, or linear interpolation between neighbouring points.
    pub fn lookup(&self, notional: u64, interpolate: bool) -> Result<f64, AnalysisError> {
        if let Some((_, v)) = self.points.iter().find(|(n, _)| *n == notional) {
            return Ok(*v);
        }
        if !interpolate {
            return Err(AnalysisError::NotionalNotInTable(notional));
        }
        let lo = self.points.iter().filter(|(n, _)| *n < notional).last();
        let hi = self.points.iter().find(|(n, _)| *n > notional);
        match (lo, hi) {
            (Some(&(n0, v0)), Some(&(n1, v1))) => {
                let t = (notional - n0) as f64 / (n1 - n0) as f64;
                Ok(v0 + t * (v1 - v0))
            }
            _ => Err(AnalysisError::NotionalNotInTable(notional)),
        }
    }
}

pub fn execution_cost(venue: Venue, trader: Trader, notional: u64, impact: f64, slippage: f64) -> f64 {
    let n = notional as f64;
    match venue {
        Venue::FairTraDEX => 0.0,
        // Summed per component so 0.15% + 0.5% does not pick up float noise.
        Venue::Amm => n * impact + n * slippage,
        Venue::DirectionRevealing => n * impact,
        Venue::IdentityRevealing => match trader {
            Trader::P1 => 0.0,
            Trader::P2 => n * impact,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub trader: Trader,
    pub notional: u64,
    pub fairtradex: f64,
    pub amm: f64,
    pub direction_revealing: f64,
    pub identity_revealing: f64,
}

pub fn cost_table(impacts: &ImpactTable, slippage: f64) -> Vec<CostRow> {
    let mut rows = Vec::new();
    for &(notional, impact) in &impacts.points {
        for trader in [Trader::P1, Trader::P2] {
            let c = |v| execution_cost(v, trader, notional, impact, slippage);
            rows.push(CostRow {
                trader,
                notional,
                fairtradex: c(Venue::FairTraDEX),
                amm: c(Venue::Amm),
                direction_revealing: c(Venue::DirectionRevealing),
                identity_revealing: c(Venue::IdentityRevealing),
            });
        }
    }
    rows
}

pub fn cost_table_csv(rows: &[CostRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
