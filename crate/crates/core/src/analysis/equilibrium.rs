//! Best-response checks for the quoting and order-submission profile.
//!
//! The single-market-maker game with one client is evaluated in closed form.
//! Competitive games run every path through the auction engine, with the same
//! random client flow reused for the profile and each deviation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{client_utility, mm_expected_profit};
use crate::auction::{self, AuctionBook, BookOrder};
use crate::model::{Market, OrderId, PlayerId, Price, PriceSpec, Rational, Side, Width};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub player: String,
    pub deviation: String,
    pub profile_utility: f64,
    pub deviation_utility: f64,
    pub gain: f64,
    pub std_err: f64,
    pub tolerance: f64,
    pub improves: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseReport {
    pub method: String,
    pub market_makers: usize,
    pub clients: usize,
    pub paths: usize,
    pub rows: Vec<DeviationRow>,
    pub max_gain: f64,
    pub equilibrium: bool,
}

impl BestResponseReport {
    fn from_rows(method: &str, market_makers: usize, clients: usize, paths: usize, rows: Vec<DeviationRow>) -> Self {
        let max_gain = rows.iter().map(|r| r.gain).fold(f64::NEG_INFINITY, f64::max);
        let equilibrium = rows.iter().all(|r| !r.improves);
        BestResponseReport { method: method.into(), market_makers, clients, paths, rows, max_gain, equilibrium }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Deviation grids. Price and width entries are multipliers of `y` and raw widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub p_ref: Vec<f64>,
    pub width: Vec<f64>,
    pub client_width: Vec<f64>,
    pub limit: Vec<f64>,
}

impl Grids {
    /// Covers `p_ref` in `[y/2, 2y]` and widths in `[1, 2 f_mcf]`.
    pub fn standard(f_mcf: f64) -> Grids {
        let mut width = vec![1.0, 1.02, 1.05, 1.1, 1.15, f_mcf.sqrt(), 1.2, f_mcf, 1.3, 1.5, 1.75, 2.0 * f_mcf];
        width.sort_by(f64::total_cmp);
        width.dedup();
        Grids {
            p_ref: vec![0.5, 0.6, 0.75, 0.9, 0.95, 0.99, 0.999, 1.001, 1.01, 1.05, 1.1, 1.25, 1.5, 1.75, 2.0],
            width: width.clone(),
            client_width: width,
            limit: vec![0.5, 0.8, 0.9, 0.95, 0.99, 1.0, 1.01, 1.05, 1.1, 1.25, 1.5],
        }
    }
}

/// Closed-form check with one market maker and one client of notional `x`.
/// The profile is a quote at `(y, f_mcf)` and a market order accepting `f_mcf`.
pub fn closed_form_single_mm(x: f64, y: f64, f_mcf: f64, delta: f64, grids: &Grids) -> BestResponseReport {
    let eps = 1e-9 * x;
    let mm_u = |p: f64, w: f64, w_req: f64| if w <= w_req { mm_expected_profit(x, y, p, w, delta) } else { 0.0 };
    // Client side: buys lift the offer, sells hit the bid, each with probability 1/2.
    let client_u = |p: f64, w: f64, w_req: f64, limit: Option<f64>| {
        if w > w_req {
            return 0.0;
        }
        let (bid, offer) = (p / w.sqrt(), p * w.sqrt());
        let buy_fills = limit.map_or(true, |m| y * m >= offer);
        let sell_fills = limit.map_or(true, |m| y / m <= bid);
        let b = if buy_fills { x * client_utility(offer, y, Side::Buy, f_mcf) } else { 0.0 };
        let s = if sell_fills { x * client_utility(bid, y, Side::Sell, f_mcf) } else { 0.0 };
        0.5 * b + 0.5 * s
    };
    let base_mm = mm_u(y, f_mcf, f_mcf);
    let base_client = client_u(y, f_mcf, f_mcf, None);
    let mut rows = Vec::new();
    let mut push = |player: &str, dev: String, base: f64, u: f64| {
        let gain = u - base;
        rows.push(DeviationRow {
            player: player.into(),
            deviation: dev,
            profile_utility: base,
            deviation_utility: u,
            gain,
            std_err: 0.0,
            tolerance: eps,
            improves: gain > eps,
        });
    };
    for &m in &grids.p_ref {
        for &w in &grids.width {
            push("mm", format!("quote p_ref={m}y w={w}"), base_mm, mm_u(m * y, w, f_mcf));
        }
    }
    for &w_req in &grids.client_width {
        push("client", format!("market width_req={w_req}"), base_client, client_u(y, f_mcf, w_req, None));
    }
    for &m in &grids.limit {
        push("client", format!("limit {m}y"), base_client, client_u(y, f_mcf, f_mcf, Some(m)));
    }
    BestResponseReport::from_rows("closed_form", 1, 1, 1, rows)
}

/// Monte-Carlo game run through the auction engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McGame {
    /// Mid price in ticks (A atoms per B atom).
    pub y: u64,
    pub f_mcf: f64,
    pub delta: f64,
    pub market_makers: usize,
    /// Width every market maker quotes in the profile.
    pub profile_width: f64,
    pub clients: usize,
    pub min_notional: u64,
    pub max_notional: u64,
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Quote {
    p_ref: f64,
    w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Play {
    Market { w_req: f64 },
    Limit { factor: f64, w_req: f64 },
}

struct Draw {
    dirs: Vec<Side>,
    notionals: Vec<u64>,
    jitter: Vec<u64>,
}

struct PathResult {
    mm: Vec<f64>,
    mm_flow: Vec<u64>,
    client: Vec<f64>,
}

fn width_rational(w: f64) -> Width {
    let r = Rational::new((w * 1e6).round() as u64, 1_000_000);
    Width::finite(r).unwrap_or(Width::one())
}

impl McGame {
    fn market_of(&self, q: Quote, jitter: u64) -> Market {
        let root = q.w.sqrt();
        let mut bid = (q.p_ref / root).ceil().max(1.0) as u64;
        let mut offer = (q.p_ref * root).floor() as u64;
        if offer < bid {
            bid = q.p_ref.round().max(1.0) as u64;
            offer = bid;
        }
        let depth = self.clients as u64 * self.max_notional * 2 + jitter;
        Market::new(Price(bid), depth, Price(offer), depth / offer + 1).expect("bid <= offer")
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Draw {
        let dirs = (0..self.clients).map(|_| if rng.gen_bool(0.5) { Side::Buy } else { Side::Sell }).collect();
        let notionals = (0..self.clients).map(|_| rng.gen_range(self.min_notional..=self.max_notional)).collect();
        let jitter = (0..self.market_makers).map(|_| rng.gen_range(0..1000)).collect();
        Draw { dirs, notionals, jitter }
    }

    fn play(&self, d: &Draw, quotes: &[Quote], plays: &[Play]) -> PathResult {
        let y = self.y as f64;
        let markets: Vec<(PlayerId, Market)> =
            quotes.iter().enumerate().map(|(j, q)| (PlayerId(j as u32 + 1), self.market_of(*q, d.jitter[j]))).collect();
        let tight = auction::select_tight_market(&markets, |_, _| true);
        let mut book = AuctionBook { w_tight: Width::Any, min_tick: 1, ..Default::default() };
        let client_id = |i: usize| PlayerId(1000 + i as u32);
        let mut net = 0i128;
        for i in 0..self.clients {
            let (w_req, price) = match plays[i] {
                Play::Market { w_req } => (w_req, PriceSpec::Mkt),
                Play::Limit { factor, w_req } => {
                    let p = match d.dirs[i] {
                        Side::Buy => y * factor,
                        Side::Sell => y / factor,
                    };
                    (w_req, PriceSpec::Limit(Price(p.round().max(1.0) as u64)))
                }
            };
            let x = d.notionals[i];
            let (size, list) = match d.dirs[i] {
                Side::Buy => {
                    net += x as i128;
                    (x, &mut book.buy_orders)
                }
                Side::Sell => {
                    net -= x as i128;
                    ((x / self.y).max(1), &mut book.sell_orders)
                }
            };
            list.push(BookOrder { id: OrderId(i as u64), owner: client_id(i), size, price, width_req: width_rational(w_req) });
        }
        if let Some((mm, m)) = tight {
            book.w_tight = m.width();
            let base = self.clients as u64;
            book.buy_orders.push(BookOrder { id: OrderId(base), owner: mm, size: m.size_bid, price: PriceSpec::Limit(m.bid), width_req: Width::Any });
            book.sell_orders.push(BookOrder { id: OrderId(base + 1), owner: mm, size: m.size_offer, price: PriceSpec::Limit(m.offer), width_req: Width::Any });
        }
        let (kept, _) = book.filter_by_width();
        let y_post = match net.signum() {
            1 => y * self.delta,
            -1 => y / self.delta,
            _ => y,
        };
        let mut out = PathResult { mm: vec![0.0; quotes.len()], mm_flow: vec![0; quotes.len()], client: vec![0.0; self.clients] };
        let Some(claim) = auction::find_clearing_price(&kept).expect("valid book") else { return out };
        let res = auction::settle(&kept, &claim).expect("oracle claim settles");
        let cp = claim.cp.0 as f64;
        for f in &res.fills {
            if f.owner.0 >= 1000 {
                let i = (f.owner.0 - 1000) as usize;
                if f.executed > 0 {
                    let notional = match f.side {
                        Side::Buy => f.executed as f64,
                        Side::Sell => f.received as f64,
                    };
                    out.client[i] += notional * client_utility(cp, y, f.side, self.f_mcf);
                }
            } else {
                let j = (f.owner.0 - 1) as usize;
                out.mm_flow[j] += f.executed;
                out.mm[j] += match f.side {
                    Side::Buy => f.received as f64 * y_post - f.executed as f64,
                    Side::Sell => f.received as f64 - f.executed as f64 * y_post,
                };
            }
        }
        out
    }

    fn profile(&self) -> (Vec<Quote>, Vec<Play>) {
        let q = Quote { p_ref: self.y as f64, w: self.profile_width };
        (vec![q; self.market_makers], vec![Play::Market { w_req: self.f_mcf }; self.clients])
    }

    /// Runs the profile and every unilateral deviation of market maker 1 and client 1.
    pub fn best_response(&self, grids: &Grids) -> BestResponseReport {
        let (quotes, plays) = self.profile();
        let y = self.y as f64;
        let mut devs: Vec<(String, String, Vec<Quote>, Vec<Play>)> = Vec::new();
        for &m in &grids.p_ref {
            let mut q = quotes.clone();
            q[0].p_ref = m * y;
            devs.push(("mm".into(), format!("quote p_ref={m}y w={}", self.profile_width), q, plays.clone()));
        }
        for &w in &grids.width {
            let mut q = quotes.clone();
            q[0].w = w;
            devs.push(("mm".into(), format!("quote p_ref=1y w={w}"), q, plays.clone()));
        }
        for &w_req in &grids.client_width {
            let mut p = plays.clone();
            p[0] = Play::Market { w_req };
            devs.push(("client".into(), format!("market width_req={w_req}"), quotes.clone(), p));
        }
        for &factor in &grids.limit {
            let mut p = plays.clone();
            p[0] = Play::Limit { factor, w_req: self.f_mcf };
            devs.push(("client".into(), format!("limit {factor}y"), quotes.clone(), p));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.paths;
        let mut base_sum = vec![0.0f64; 2];
        let mut stats = vec![(0.0f64, 0.0f64, 0.0f64); devs.len()];
        let mean_notional = (self.min_notional + self.max_notional) as f64 / 2.0;
        for _ in 0..n {
            let d = self.draw(&mut rng);
            let base = self.play(&d, &quotes, &plays);
            let b = [base.mm[0], base.client[0]];
            base_sum[0] += b[0];
            base_sum[1] += b[1];
            for (k, (who, _, q, p)) in devs.iter().enumerate() {
                let r = self.play(&d, q, p);
                let (u, bu) = if who == "mm" { (r.mm[0], b[0]) } else { (r.client[0], b[1]) };
                let diff = u - bu;
                stats[k].0 += u;
                stats[k].1 += diff;
                stats[k].2 += diff * diff;
            }
        }
        let nf = n as f64;
        let rows = devs
            .iter()
            .zip(stats)
            .map(|((who, dev, _, _), (u, s, s2))| {
                let idx = if who == "mm" { 0 } else { 1 };
                let gain = s / nf;
                let var = (s2 / nf - gain * gain).max(0.0) * nf / (nf - 1.0).max(1.0);
                let se = (var / nf).sqrt();
                let tolerance = 2.0 * se + 1e-9 * mean_notional;
                DeviationRow {
                    player: who.clone(),
                    deviation: dev.clone(),
                    profile_utility: base_sum[idx] / nf,
                    deviation_utility: u / nf,
                    gain,
                    std_err: se,
                    tolerance,
                    improves: gain > tolerance,
                }
            })
            .collect();
        BestResponseReport::from_rows("monte_carlo", self.market_makers, self.clients, n, rows)
    }

    /// Average executed flow of market maker 1 under the profile and with its
    /// quote replaced by `(p_ref_mult * y, w)`.
    pub fn mm_flow(&self, p_ref_mult: f64, w: f64) -> (f64, f64) {
        let (quotes, plays) = self.profile();
        let mut dev = quotes.clone();
        dev[0] = Quote { p_ref: p_ref_mult * self.y as f64, w };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..self.paths {
            let d = self.draw(&mut rng);
            a += self.play(&d, &quotes, &plays).mm_flow[0] as f64;
            b += self.play(&d, &dev, &plays).mm_flow[0] as f64;
        }
        (a / self.paths as f64, b / self.paths as f64)
    }

    /// Mean client-1 utility and fill rate with a limit order at `factor * y`.
    pub fn client_limit_effect(&self, factor: f64) -> ((f64, f64), (f64, f64)) {
        let (quotes, plays) = self.profile();
        let mut dev = plays.clone();
        dev[0] = Play::Limit { factor, w_req: self.f_mcf };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut acc = [0.0f64; 4];
        for _ in 0..self.paths {
            let d = self.draw(&mut rng);
            let base = self.play(&d, &quotes, &plays).client[0];
            let devu = self.play(&d, &quotes, &dev).client[0];
            acc[0] += base;
            acc[1] += (base != 0.0) as u8 as f64;
            acc[2] += devu;
            acc[3] += (devu != 0.0) as u8 as f64;
        }
        let n = self.paths as f64;
        ((acc[0] / n, acc[1] / n), (acc[2] / n, acc[3] / n))
    }
}
