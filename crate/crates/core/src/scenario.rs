//! Deterministic scenario runner: agents, chain and protocol driven block by
//! block from a JSON config.
//!
//! Every random stream is seeded with `derive_seed(seed, component)`, where the
//! components are `"chain"`, `"mifp"` and `"client/<id>"`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::Mifp;
use crate::auction::{self, ClearingClaim};
use crate::chain::{ChainState, ClientReveal, CpClaim, Included, PolicyKind, TxBody};
use crate::digest::{derive_seed, h, Digest};
use crate::ledger::{EscrowTag, Ledger};
use crate::membership::{check_proof, gen_secret, prove_membership, Secret};
use crate::model::{
    div_floor, Market, Order, PlayerId, Price, PriceSpec, ProtocolParams, Quantity, Side, TokenId, Width,
};
use crate::protocol::{Phase, Protocol, SettlementReport};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated at height {height}: {message}")]
    Invariant { height: u64, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ScenarioError {
    /// Process exit code for the error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_) | ScenarioError::Io(_) => 2,
            ScenarioError::Invariant { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MifpConfig {
    /// Starting mid price in ticks.
    pub y0: f64,
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Client,
    Mm,
    Relayer,
    BountyHunter,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Funding {
    #[serde(rename = "ref", default)]
    pub reference: Quantity,
    #[serde(default)]
    pub a: Quantity,
    #[serde(default)]
    pub b: Quantity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub role: Role,
    pub strategy: String,
    #[serde(default = "one_agent")]
    pub count: u32,
    #[serde(default)]
    pub funding: Funding,
}

fn one_agent() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default = "trace_name")]
    pub trace: String,
    #[serde(default = "settlements_name")]
    pub settlements: String,
    #[serde(default = "summary_name")]
    pub summary: String,
}

fn trace_name() -> String {
    "trace.jsonl".into()
}
fn settlements_name() -> String {
    "settlements.json".into()
}
fn summary_name() -> String {
    "summary.csv".into()
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs { dir: None, trace: trace_name(), settlements: settlements_name(), summary: summary_name() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub rounds: u64,
    pub ordering_policy: PolicyKind,
    pub params: ProtocolParams,
    pub mifp: MifpConfig,
    /// Reference tokens placed in the bounty treasury at setup.
    #[serde(default)]
    pub bounty_treasury: Quantity,
    /// Declared registration threshold for anonymity. Informational only.
    #[serde(default)]
    pub n_psi: Option<u64>,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub outputs: Outputs,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<ScenarioConfig, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        ScenarioConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.params.validate().map_err(|e| ScenarioError::Config(format!("params: {e}")))?;
        if !(self.mifp.y0 >= 1.0 && self.mifp.y0.is_finite()) {
            return Err(ScenarioError::Config("mifp.y0 must be at least one tick".into()));
        }
        if !(self.mifp.delta >= 1.0 && self.mifp.delta.is_finite()) {
            return Err(ScenarioError::Config("mifp.delta must be at least 1".into()));
        }
        for (i, a) in self.agents.iter().enumerate() {
            Strategy::parse(a.role, &a.strategy).map_err(|e| ScenarioError::Config(format!("agents[{i}].strategy: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Strategy {
    /// Market orders accepting `f_mcf`, re-registering every round.
    ClientMarket,
    /// Limit orders at the client's break-even price.
    ClientLimit,
    /// Commits once and never reveals.
    ClientSilent,
    /// Commits a withdrawal and leaves.
    ClientWithdraw,
    /// Width-1 market at the mid price.
    MmCompetitive,
    /// Width `f_mcf` market at the mid price.
    MmWide,
    /// Commits every round and never reveals.
    MmSilent,
    Relayer,
    HunterHonest,
    /// Claims a price one tick off the optimum.
    HunterInvalid,
}

impl Strategy {
    fn parse(role: Role, s: &str) -> Result<Strategy, String> {
        let st = match (role, s) {
            (Role::Client, "market") => Strategy::ClientMarket,
            (Role::Client, "limit") => Strategy::ClientLimit,
            (Role::Client, "silent") => Strategy::ClientSilent,
            (Role::Client, "withdraw") => Strategy::ClientWithdraw,
            (Role::Mm, "competitive") => Strategy::MmCompetitive,
            (Role::Mm, "wide") => Strategy::MmWide,
            (Role::Mm, "silent") => Strategy::MmSilent,
            (Role::Relayer, "honest") => Strategy::Relayer,
            (Role::BountyHunter, "honest") => Strategy::HunterHonest,
            (Role::BountyHunter, "invalid") => Strategy::HunterInvalid,
            _ => return Err(format!("unknown strategy {s:?} for role {role:?}")),
        };
        Ok(st)
    }
}

struct Agent {
    id: PlayerId,
    strategy: Strategy,
    rng: ChaCha8Rng,
    secret: Secret,
    next_secret: Option<Secret>,
    secrets_used: u64,
    order: Option<Order>,
    market: Option<Market>,
    acted: Option<(u64, Phase)>,
    done: bool,
}

impl Agent {
    fn fresh_secret(&mut self) -> Secret {
        self.secrets_used += 1;
        gen_secret(self.rng.gen::<u64>() ^ self.secrets_used)
    }
}

#[derive(Debug, Serialize)]
struct TraceRecord<'a> {
    height: u64,
    kind: &'a str,
    payload_digest: Digest,
    #[serde(skip_serializing_if = "Option::is_none")]
    submitted: Option<u64>,
    effects: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: u64,
    pub height: u64,
    pub cp: String,
    pub volume_b: Quantity,
    pub imbalance_a: i128,
    pub w_tight: String,
    pub tight_mm: String,
    pub fills: usize,
    pub width_filtered: usize,
    pub burned: u128,
    pub blacklisted: usize,
    pub bounty_winner: String,
    pub bounty_paid: Quantity,
    pub mifp_y: f64,
}

/// Everything a run produces, before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace_jsonl: String,
    pub settlements: Vec<SettlementReport>,
    pub summary: Vec<SummaryRow>,
    /// Set when a round failed to settle within the liveness budget.
    pub stalled: bool,
    pub final_height: u64,
}

impl RunOutput {
    pub fn settlements_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.settlements).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record([
            "round", "height", "cp", "volume_b", "imbalance_a", "w_tight", "tight_mm", "fills", "width_filtered", "burned",
            "blacklisted", "bounty_winner", "bounty_paid", "mifp_y",
        ])
        .expect("in-memory csv");
        for r in &self.summary {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Writes the three output files into `dir`, returning their paths.
    pub fn write(&self, dir: &Path, outputs: &Outputs) -> Result<[PathBuf; 3], ScenarioError> {
        fs::create_dir_all(dir)?;
        let paths = [dir.join(&outputs.trace), dir.join(&outputs.settlements), dir.join(&outputs.summary)];
        fs::write(&paths[0], &self.trace_jsonl)?;
        fs::write(&paths[1], self.settlements_json())?;
        fs::write(&paths[2], self.summary_csv())?;
        Ok(paths)
    }
}

struct Runner {
    chain: ChainState,
    protocol: Protocol,
    agents: Vec<Agent>,
    clients: BTreeSet<PlayerId>,
    mifp: Mifp,
    trace: String,
    settlements: Vec<SettlementReport>,
    summary: Vec<SummaryRow>,
}

/// Rounds `x` to the nearest positive multiple of `tick`.
fn to_tick(x: f64, tick: u64) -> u64 {
    (((x / tick as f64).round() as u64).max(1)) * tick
}

impl Runner {
    fn record(&mut self, rec: TraceRecord) {
        self.trace.push_str(&serde_json::to_string(&rec).expect("trace serializes"));
        self.trace.push('\n');
    }

    fn invariant(&self, message: String) -> ScenarioError {
        ScenarioError::Invariant { height: self.chain.height(), message }
    }

    fn mm_market(&self, strategy: Strategy) -> Market {
        let p = self.protocol.params();
        let tick = p.min_tick;
        let y = self.mifp.y();
        let root = (*p.f_mcf.numer() as f64 / *p.f_mcf.denom() as f64).sqrt();
        let (bid, offer) = match strategy {
            Strategy::MmWide => {
                let bid = ((y / root / tick as f64).ceil() as u64).max(1) * tick;
                let offer = (((y * root) / tick as f64).floor() as u64).max(1) * tick;
                if bid <= offer {
                    (bid, offer)
                } else {
                    (to_tick(y, tick), to_tick(y, tick))
                }
            }
            _ => (to_tick(y, tick), to_tick(y, tick)),
        };
        // Sized to the book contribution the escrow allows, never below the notional floor.
        let e_mm = self.protocol.e_mm();
        let size_bid = div_floor(e_mm, &p.p_a).unwrap_or(u64::MAX).max(1);
        let size_offer = (size_bid / offer).max(1);
        Market { bid: Price(bid), size_bid, offer: Price(offer), size_offer }
    }

    fn client_order(&mut self, idx: usize) -> Option<Order> {
        let p = self.protocol.params().clone();
        let y = self.mifp.y();
        let who = self.agents[idx].id;
        let bal_a = self.protocol.ledger.balance(who, TokenId::A);
        let bal_b = self.protocol.ledger.balance(who, TokenId::B);
        let width_req = Width::Finite(p.f_mcf);
        let strategy = self.agents[idx].strategy;
        if strategy == Strategy::ClientWithdraw {
            return Some(Order { tkn: TokenId::A, size: 0, price: PriceSpec::Withdraw, width_req });
        }
        let rng = &mut self.agents[idx].rng;
        let mut side = if rng.gen_bool(0.5) { Side::Buy } else { Side::Sell };
        let cap_a = div_floor(p.e_client, &p.p_a).unwrap_or(u64::MAX).min(bal_a);
        let cap_b = (div_floor(p.e_client, &p.p_a).unwrap_or(u64::MAX) / to_tick(y, p.min_tick)).min(bal_b);
        if (side == Side::Buy && cap_a == 0) || (side == Side::Sell && cap_b == 0) {
            side = match side {
                Side::Buy => Side::Sell,
                Side::Sell => Side::Buy,
            };
        }
        let cap = match side {
            Side::Buy => cap_a,
            Side::Sell => cap_b,
        };
        if cap == 0 {
            return None;
        }
        let size = rng.gen_range(1..=cap);
        let root = (*p.f_mcf.numer() as f64 / *p.f_mcf.denom() as f64).sqrt();
        let price = match strategy {
            Strategy::ClientLimit => {
                let tick = p.min_tick;
                let lp = match side {
                    Side::Buy => ((y * root / tick as f64).floor() as u64).max(1) * tick,
                    Side::Sell => ((y / root / tick as f64).ceil() as u64).max(1) * tick,
                };
                PriceSpec::Limit(Price(lp))
            }
            _ => PriceSpec::Mkt,
        };
        Some(Order { tkn: side.sold(), size, price, width_req })
    }

    fn act(&mut self) -> Result<(), ScenarioError> {
        let Some(phase) = self.protocol.phase() else { return Ok(()) };
        let round = self.protocol.round();
        for i in 0..self.agents.len() {
            if self.agents[i].done || self.agents[i].acted == Some((round, phase)) {
                continue;
            }
            let id = self.agents[i].id;
            let strategy = self.agents[i].strategy;
            // A pending re-registration becomes live once the protocol lists it.
            if let Some(next) = self.agents[i].next_secret {
                if self.protocol.clients().contains(&next.reg_id()) {
                    self.agents[i].secret = next;
                    self.agents[i].next_secret = None;
                }
            }
            let submitted = match (strategy, phase) {
                (Strategy::ClientMarket | Strategy::ClientLimit | Strategy::ClientSilent | Strategy::ClientWithdraw, Phase::Commit) => {
                    let secret = self.agents[i].secret;
                    if !self.protocol.clients().contains(&secret.reg_id()) {
                        false
                    } else if let Some(order) = self.client_order(i) {
                        let com = crate::protocol::commit_order(&order);
                        let proof = prove_membership(&secret, self.protocol.clients(), &com.0)
                            .map_err(|e| self.invariant(format!("membership proof for {id}: {e}")))?;
                        let relayed = self.chain.relay(TxBody::CommitClient { com, proof }, |c, pr| check_proof(pr, &pr.root, &c.0));
                        self.agents[i].order = Some(order);
                        relayed.is_ok()
                    } else {
                        false
                    }
                }
                (Strategy::ClientMarket | Strategy::ClientLimit | Strategy::ClientWithdraw, Phase::Reveal) => {
                    let secret = self.agents[i].secret;
                    match self.agents[i].order {
                        Some(order) if self.protocol.has_client_commit(&secret.s) => {
                            let stays = strategy != Strategy::ClientWithdraw;
                            let next = stays.then(|| self.agents[i].fresh_secret());
                            self.agents[i].next_secret = next;
                            if !stays {
                                self.agents[i].done = true;
                            }
                            let rev = ClientReveal { s: secret.s, r: secret.r, order, reg_token_new: next.map(|n| n.reg_id()) };
                            self.chain.submit(id, TxBody::RevealClient(rev)).is_ok()
                        }
                        _ => false,
                    }
                }
                (Strategy::ClientSilent, Phase::Reveal) => {
                    if self.protocol.has_client_commit(&self.agents[i].secret.s) {
                        self.agents[i].done = true;
                    }
                    true
                }
                (Strategy::MmCompetitive | Strategy::MmWide | Strategy::MmSilent, Phase::Commit) => {
                    let m = self.mm_market(strategy);
                    self.agents[i].market = Some(m);
                    self.chain.submit(id, TxBody::CommitMm { com: crate::protocol::commit_market(&m) }).is_ok()
                }
                (Strategy::MmCompetitive | Strategy::MmWide, Phase::Reveal) => match self.agents[i].market {
                    Some(market) if self.protocol.has_mm_commit(id) => self.chain.submit(id, TxBody::RevealMm { market }).is_ok(),
                    _ => false,
                },
                (Strategy::HunterHonest | Strategy::HunterInvalid, Phase::Resolution) => {
                    let (book, _) = self.protocol.book().filter_by_width();
                    let found = auction::find_clearing_price(&book).map_err(|e| self.invariant(format!("book: {e}")))?;
                    let claim = match (strategy, found) {
                        (Strategy::HunterHonest, Some(c)) => CpClaim::Price(c),
                        (Strategy::HunterHonest, None) => CpClaim::NoCross,
                        (_, Some(c)) => CpClaim::Price(ClearingClaim { cp: Price(c.cp.0 + book.min_tick), ..c }),
                        (_, None) => CpClaim::Price(ClearingClaim { cp: Price(book.min_tick), volume_b: 1, imbalance_a: 0 }),
                    };
                    self.chain.submit(id, TxBody::Cp(claim)).is_ok()
                }
                _ => false,
            };
            if submitted {
                self.agents[i].acted = Some((round, phase));
            }
        }
        Ok(())
    }

    fn execute_block(&mut self) -> Result<(), ScenarioError> {
        let block: Vec<Included> = self.chain.advance_block();
        let height = self.chain.height();
        for inc in &block {
            let res = self.protocol.execute(inc).map_err(|e| self.invariant(e.to_string()))?;
            let mut effects = res.outcome.to_string();
            if let Some(r) = inc.relayer {
                effects.push_str(&format!(" (relayed by {r})"));
            }
            self.record(TraceRecord {
                height,
                kind: inc.tx.body.kind(),
                payload_digest: inc.tx.body.digest(),
                submitted: Some(inc.submit_height),
                effects,
            });
            if let Some(rep) = res.settlement {
                rep.check().map_err(|e| self.invariant(format!("settlement report: {e}")))?;
                self.settled(rep);
            }
        }
        let changes = self.protocol.end_block(height).map_err(|e| self.invariant(e.to_string()))?;
        for c in changes {
            let effects = format!("{} -> {}: {}", c.from, c.to, c.note);
            self.record(TraceRecord {
                height,
                kind: "phase_change",
                payload_digest: h(&[b"phase", effects.as_bytes()]),
                submitted: None,
                effects,
            });
        }
        self.protocol.check_invariants().map_err(|e| self.invariant(e))?;
        Ok(())
    }

    fn settled(&mut self, rep: SettlementReport) {
        let mut net = 0i128;
        if let Some(cp) = rep.cp {
            for f in rep.fills.iter().filter(|f| self.clients.contains(&f.owner)) {
                net += match f.side {
                    Side::Buy => f.executed as i128,
                    Side::Sell => -(f.executed as i128 * cp.0 as i128),
                };
            }
        }
        let dir = match net.signum() {
            1 => Some(Side::Buy),
            -1 => Some(Side::Sell),
            _ => None,
        };
        let y = self.mifp.apply(dir);
        self.summary.push(SummaryRow {
            round: rep.round,
            height: rep.height,
            cp: rep.cp.map_or_else(|| "none".into(), |p| p.0.to_string()),
            volume_b: rep.volume_b,
            imbalance_a: rep.imbalance_a,
            w_tight: rep.w_tight.to_string(),
            tight_mm: rep.tight_mm.map_or_else(|| "none".into(), |p| p.to_string()),
            fills: rep.fills.len(),
            width_filtered: rep.width_filtered.len(),
            burned: rep.burned.iter().map(|b| b.amount as u128).sum(),
            blacklisted: rep.blacklisted.len(),
            bounty_winner: rep.bounty_winner.to_string(),
            bounty_paid: rep.bounty_paid,
            mifp_y: y,
        });
        self.settlements.push(rep);
    }
}

/// Runs a scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    cfg.validate()?;
    let params = cfg.params.clone();
    let t_eff = params.t_eff().map_err(|e| ScenarioError::Config(e.to_string()))?;
    let mut ledger = Ledger::new();
    let mut agents = Vec::new();
    let mut next = 1u32;
    let config_err = |e: crate::ledger::LedgerError| ScenarioError::Config(format!("funding: {e}"));
    for spec in &cfg.agents {
        let strategy = Strategy::parse(spec.role, &spec.strategy).map_err(ScenarioError::Config)?;
        for _ in 0..spec.count {
            let id = PlayerId(next);
            next = next.checked_add(1).filter(|n| *n < PlayerId::BURN.0).ok_or_else(|| ScenarioError::Config("too many agents".into()))?;
            for (tkn, amt) in [(TokenId::Ref, spec.funding.reference), (TokenId::A, spec.funding.a), (TokenId::B, spec.funding.b)] {
                if amt > 0 {
                    ledger.mint(id, tkn, amt).map_err(config_err)?;
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("client/{}", id.0)));
            let secret = gen_secret(rng.gen());
            agents.push(Agent { id, strategy, rng, secret, next_secret: None, secrets_used: 0, order: None, market: None, acted: None, done: false });
        }
    }
    if cfg.bounty_treasury > 0 {
        let funder = PlayerId(next);
        ledger.mint(funder, TokenId::Ref, cfg.bounty_treasury).map_err(config_err)?;
        ledger.escrow(funder, EscrowTag::Treasury, cfg.bounty_treasury).map_err(config_err)?;
    }
    let protocol = Protocol::new(params, ledger).map_err(|e| ScenarioError::Config(format!("params: {e}")))?;
    let mut chain = ChainState::new(t_eff, cfg.ordering_policy, derive_seed(cfg.seed, "chain"));
    let clients = agents
        .iter()
        .filter(|a| matches!(a.strategy, Strategy::ClientMarket | Strategy::ClientLimit | Strategy::ClientSilent | Strategy::ClientWithdraw))
        .map(|a| a.id)
        .collect();
    for a in agents.iter().filter(|a| a.strategy == Strategy::Relayer) {
        chain.register_relayer(a.id);
    }
    let mifp_seed = cfg.mifp.seed.unwrap_or_else(|| derive_seed(cfg.seed, "mifp"));
    let mut r = Runner {
        chain,
        protocol,
        agents,
        clients,
        mifp: Mifp::new(cfg.mifp.y0, cfg.mifp.delta, mifp_seed),
        trace: String::new(),
        settlements: Vec::new(),
        summary: Vec::new(),
    };
    let mut stalled = false;
    if cfg.rounds > 0 {
        // Registration warm-up: every register lands within T_eff blocks.
        for i in 0..r.agents.len() {
            if r.clients.contains(&r.agents[i].id) {
                let (id, reg_id) = (r.agents[i].id, r.agents[i].secret.reg_id());
                r.chain.submit(id, TxBody::Register { reg_id }).map_err(|e| ScenarioError::Config(e.to_string()))?;
            }
        }
        for _ in 0..t_eff {
            r.execute_block()?;
        }
        r.protocol.initialise(r.chain.height());
        let budget = 3 * t_eff + 2;
        let mut round_start = r.chain.height();
        while (r.settlements.len() as u64) < cfg.rounds {
            r.act()?;
            let before = r.settlements.len();
            r.execute_block()?;
            if r.settlements.len() > before {
                round_start = r.chain.height();
            } else if r.chain.height() - round_start > budget {
                stalled = true;
                break;
            }
        }
    }
    Ok(RunOutput {
        trace_jsonl: r.trace,
        settlements: r.settlements,
        summary: r.summary,
        stalled,
        final_height: r.chain.height(),
    })
}
