//! Value types shared by every layer: tokens, prices, widths, markets,
//! orders and protocol parameters.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Token amount in indivisible atoms.
pub type Quantity = u64;

/// Exact non-negative rational used for widths and parameters.
pub type Rational = Ratio<u64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid market: {0}")]
    InvalidMarket(String),
    #[error("invalid width: {0}")]
    InvalidWidth(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("arithmetic overflow")]
    Overflow,
    #[error("price hint required for token B notional")]
    MissingPriceHint,
    #[error("cannot parse rational from {0:?}")]
    BadRational(String),
}

/// Checked addition on quantities.
pub fn q_add(a: Quantity, b: Quantity) -> Result<Quantity, ModelError> {
    a.checked_add(b).ok_or(ModelError::Overflow)
}

/// Checked multiplication on quantities.
pub fn q_mul(a: Quantity, b: Quantity) -> Result<Quantity, ModelError> {
    a.checked_mul(b).ok_or(ModelError::Overflow)
}

fn narrow(v: u128) -> Result<Quantity, ModelError> {
    u64::try_from(v).map_err(|_| ModelError::Overflow)
}

/// Parses `"n/d"`, `"n"` or a plain decimal such as `"1.21"` into an exact rational.
pub fn parse_rational(s: &str) -> Result<Rational, ModelError> {
    let bad = || ModelError::BadRational(s.to_string());
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| bad())?;
        let d: u64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(n, d));
    }
    if let Some((int, frac)) = s.split_once('.') {
        if frac.is_empty() || frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let den = 10u64.pow(frac.len() as u32);
        let frac: u64 = frac.parse().map_err(|_| bad())?;
        let num = int.checked_mul(den).and_then(|v| v.checked_add(frac)).ok_or_else(bad)?;
        return Ok(Ratio::new(num, den));
    }
    let n: u64 = s.parse().map_err(|_| bad())?;
    Ok(Ratio::from_integer(n))
}

pub fn format_rational(r: &Rational) -> String {
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// floor(r * q), exact.
pub fn mul_floor(r: &Rational, q: u64) -> Result<u64, ModelError> {
    narrow(*r.numer() as u128 * q as u128 / *r.denom() as u128)
}

/// floor(q / r), exact. `r` must be non-zero.
pub fn div_floor(q: u64, r: &Rational) -> Result<u64, ModelError> {
    if *r.numer() == 0 {
        return Err(ModelError::Overflow);
    }
    narrow(q as u128 * *r.denom() as u128 / *r.numer() as u128)
}

/// Serde adapter for rationals written as strings (`"3/2"`, `"1.21"`) or integers.
pub mod rational_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rational(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Ratio::from_integer(v)),
            Raw::Text(t) => parse_rational(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Participant identifier. Two reserved values name the protocol account and
/// the burn sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlayerId(pub u32);

impl PlayerId {
    pub const PROTOCOL: PlayerId = PlayerId(0);
    pub const BURN: PlayerId = PlayerId(u32::MAX);

    pub fn to_bytes(self) -> [u8; 4] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PlayerId::PROTOCOL => f.write_str("protocol"),
            PlayerId::BURN => f.write_str("burn"),
            PlayerId(n) => write!(f, "P{n}"),
        }
    }
}

impl FromStr for PlayerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "protocol" => Ok(PlayerId::PROTOCOL),
            "burn" => Ok(PlayerId::BURN),
            _ => s
                .strip_prefix('P')
                .and_then(|n| n.parse::<u32>().ok())
                .filter(|n| *n != 0 && *n != u32::MAX)
                .map(PlayerId)
                .ok_or_else(|| format!("bad player id {s:?}")),
        }
    }
}

impl Serialize for PlayerId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PlayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenId {
    /// Reference token used for escrows, fees and bounties.
    Ref,
    A,
    B,
}

impl TokenId {
    pub fn tag(self) -> u8 {
        match self {
            TokenId::Ref => 0,
            TokenId::A => 1,
            TokenId::B => 2,
        }
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenId::Ref => "ref",
            TokenId::A => "a",
            TokenId::B => "b",
        })
    }
}

/// Side of the swap. Selling A is a buy of B, selling B is a sell of B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn of_token(tkn: TokenId) -> Option<Side> {
        match tkn {
            TokenId::A => Some(Side::Buy),
            TokenId::B => Some(Side::Sell),
            TokenId::Ref => None,
        }
    }

    /// Token this side deposits.
    pub fn sold(self) -> TokenId {
        match self {
            Side::Buy => TokenId::A,
            Side::Sell => TokenId::B,
        }
    }

    /// Token this side receives.
    pub fn bought(self) -> TokenId {
        match self {
            Side::Buy => TokenId::B,
            Side::Sell => TokenId::A,
        }
    }
}

/// Price in ticks, quoted as A atoms per B atom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Price(pub u64);

/// Price field of an order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PriceSpec {
    Limit(Price),
    Mkt,
    Withdraw,
}

impl PriceSpec {
    pub fn limit(self) -> Option<Price> {
        match self {
            PriceSpec::Limit(p) => Some(p),
            _ => None,
        }
    }
}

impl Serialize for PriceSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PriceSpec::Limit(p) => s.serialize_u64(p.0),
            PriceSpec::Mkt => s.serialize_str("mkt"),
            PriceSpec::Withdraw => s.serialize_str("withdraw"),
        }
    }
}

impl<'de> Deserialize<'de> for PriceSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Ticks(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Ticks(0) => Err(serde::de::Error::custom("limit price must be positive")),
            Raw::Ticks(t) => Ok(PriceSpec::Limit(Price(t))),
            Raw::Word(w) if w.eq_ignore_ascii_case("mkt") => Ok(PriceSpec::Mkt),
            Raw::Word(w) if w.eq_ignore_ascii_case("withdraw") => Ok(PriceSpec::Withdraw),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("bad price {w:?}"))),
        }
    }
}

/// Market width `offer / bid`, or `Any`, which compares above every number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Width {
    Finite(Rational),
    Any,
}

impl Width {
    pub fn finite(r: Rational) -> Result<Width, ModelError> {
        if r < Ratio::from_integer(1) {
            return Err(ModelError::InvalidWidth(format!("{} < 1", format_rational(&r))));
        }
        Ok(Width::Finite(r))
    }

    pub fn one() -> Width {
        Width::Finite(Ratio::from_integer(1))
    }

    pub fn is_any(&self) -> bool {
        matches!(self, Width::Any)
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Width::Finite(r) => *r.numer() as f64 / *r.denom() as f64,
            Width::Any => f64::INFINITY,
        }
    }
}

impl Default for Width {
    fn default() -> Self {
        Width::Any
    }
}

impl Ord for Width {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Width::Any, Width::Any) => Ordering::Equal,
            (Width::Any, _) => Ordering::Greater,
            (_, Width::Any) => Ordering::Less,
            (Width::Finite(a), Width::Finite(b)) => a.cmp(b),
        }
    }
}

impl PartialOrd for Width {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Width::Any => f.write_str("any"),
            Width::Finite(r) => f.write_str(&format_rational(r)),
        }
    }
}

impl FromStr for Width {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("any") {
            Ok(Width::Any)
        } else {
            Width::finite(parse_rational(s)?)
        }
    }
}

impl Serialize for Width {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Width {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Width::finite(Ratio::from_integer(v)),
            Raw::Text(t) => t.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// A two-sided quote. `size_bid` is in A atoms, `size_offer` in B atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Market {
    pub bid: Price,
    pub size_bid: Quantity,
    pub offer: Price,
    pub size_offer: Quantity,
}

impl Market {
    pub fn new(bid: Price, size_bid: Quantity, offer: Price, size_offer: Quantity) -> Result<Market, ModelError> {
        let m = Market { bid, size_bid, offer, size_offer };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.bid.0 == 0 {
            return Err(ModelError::InvalidMarket("bid must be positive".into()));
        }
        if self.bid > self.offer {
            return Err(ModelError::InvalidMarket(format!("bid {} above offer {}", self.bid.0, self.offer.0)));
        }
        Ok(())
    }

    pub fn width(&self) -> Width {
        Width::Finite(Ratio::new(self.offer.0, self.bid.0))
    }

    /// Geometric mid `sqrt(bid * offer)`; analysis only.
    pub fn p_ref(&self) -> f64 {
        (self.bid.0 as f64 * self.offer.0 as f64).sqrt()
    }

    pub fn encode(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out[..8].copy_from_slice(&self.bid.0.to_be_bytes());
        out[8..16].copy_from_slice(&self.size_bid.to_be_bytes());
        out[16..24].copy_from_slice(&self.offer.0.to_be_bytes());
        out[24..].copy_from_slice(&self.size_offer.to_be_bytes());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderId(pub u64);

/// A client order as committed. The owner is not part of the commitment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Order {
    pub tkn: TokenId,
    pub size: Quantity,
    pub price: PriceSpec,
    pub width_req: Width,
}

impl Order {
    /// Canonical bytes hashed into the order commitment.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40);
        out.push(self.tkn.tag());
        out.extend_from_slice(&self.size.to_be_bytes());
        match self.price {
            PriceSpec::Limit(p) => {
                out.push(0);
                out.extend_from_slice(&p.0.to_be_bytes());
            }
            PriceSpec::Mkt => out.push(1),
            PriceSpec::Withdraw => out.push(2),
        }
        match self.width_req {
            Width::Any => out.push(0),
            Width::Finite(r) => {
                out.push(1);
                out.extend_from_slice(&r.numer().to_be_bytes());
                out.extend_from_slice(&r.denom().to_be_bytes());
            }
        }
        out
    }
}

fn default_tick() -> u64 {
    1
}

fn zero_ratio() -> Rational {
    Ratio::from_integer(0)
}

fn one_ratio() -> Rational {
    Ratio::from_integer(1)
}

/// Protocol configuration. `E_MM` is derived as `floor(c * Q_not)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    pub e_client: Quantity,
    pub q_not: Quantity,
    #[serde(with = "rational_serde")]
    pub c: Rational,
    pub f_r: Quantity,
    pub res_bounty: Quantity,
    #[serde(default = "default_tick")]
    pub min_tick: u64,
    #[serde(with = "rational_serde")]
    pub p_a: Rational,
    pub t: u64,
    #[serde(with = "rational_serde", default = "zero_ratio")]
    pub alpha: Rational,
    #[serde(with = "rational_serde")]
    pub f_mcf: Rational,
    #[serde(with = "rational_serde", default = "one_ratio")]
    pub delta: Rational,
    /// Swap price used to cap the size of market sell orders of B.
    pub indicative_price: Price,
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidParams(m.to_string()));
        if self.c <= one_ratio() {
            return bad("c must exceed 1");
        }
        if self.q_not == 0 || self.e_client == 0 {
            return bad("q_not and e_client must be positive");
        }
        if *self.p_a.numer() == 0 {
            return bad("p_a must be positive");
        }
        if self.t == 0 {
            return bad("t must be positive");
        }
        if self.alpha >= one_ratio() {
            return bad("alpha must be below 1");
        }
        if self.f_mcf <= one_ratio() {
            return bad("f_mcf must exceed 1");
        }
        if self.delta < one_ratio() {
            return bad("delta must be at least 1");
        }
        if self.min_tick == 0 {
            return bad("min_tick must be positive");
        }
        if self.indicative_price.0 == 0 || self.indicative_price.0 % self.min_tick != 0 {
            return bad("indicative_price must be a positive multiple of min_tick");
        }
        self.e_mm()?;
        self.t_eff()?;
        Ok(())
    }

    pub fn e_mm(&self) -> Result<Quantity, ModelError> {
        mul_floor(&self.c, self.q_not)
    }

    /// `ceil(T / (1 - alpha))`.
    pub fn t_eff(&self) -> Result<u64, ModelError> {
        t_eff(self.t, &self.alpha)
    }
}

pub fn t_eff(t: u64, alpha: &Rational) -> Result<u64, ModelError> {
    let (n, d) = (*alpha.numer() as u128, *alpha.denom() as u128);
    if n >= d {
        return Err(ModelError::InvalidParams("alpha must be below 1".into()));
    }
    let num = t as u128 * d;
    let den = d - n;
    narrow(num.div_ceil(den))
}

/// Reference-token value of `q` atoms of `tkn`. Token B needs the swap price.
pub fn notional(q: Quantity, tkn: TokenId, p_a: &Rational, price_hint: Option<Price>) -> Result<Quantity, ModelError> {
    match tkn {
        TokenId::Ref => Ok(q),
        TokenId::A => mul_floor(p_a, q),
        TokenId::B => {
            let p = price_hint.ok_or(ModelError::MissingPriceHint)?;
            let v = q as u128 * p.0 as u128 * *p_a.numer() as u128 / *p_a.denom() as u128;
            narrow(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: u64, d: u64) -> Rational {
        Ratio::new(n, d)
    }

    #[test]
    fn t_eff_examples() {
        assert_eq!(t_eff(3, &r(1, 2)).unwrap(), 6);
        assert_eq!(t_eff(10, &r(3, 4)).unwrap(), 40);
        assert_eq!(t_eff(3, &r(0, 1)).unwrap(), 3);
        assert_eq!(t_eff(5, &r(1, 3)).unwrap(), 8);
        assert!(t_eff(3, &r(1, 1)).is_err());
    }

    #[test]
    fn width_ordering() {
        let w = Market::new(Price(100), 1, Price(121), 1).unwrap().width();
        assert_eq!(w, Width::Finite(r(121, 100)));
        assert!(Width::Any > w);
        assert!(Width::one() < w);
        assert_eq!(Market::new(Price(7), 1, Price(7), 1).unwrap().width(), Width::one());
    }

    #[test]
    fn market_validation() {
        assert!(Market::new(Price(0), 1, Price(5), 1).is_err());
        assert!(Market::new(Price(6), 1, Price(5), 1).is_err());
        let m = Market::new(Price(90), 1, Price(110), 1).unwrap();
        assert!((m.p_ref() - (9900f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn notional_rules() {
        let pa = r(3, 2);
        assert_eq!(notional(10, TokenId::A, &pa, None).unwrap(), 15);
        assert_eq!(notional(10, TokenId::B, &pa, Some(Price(4))).unwrap(), 60);
        assert_eq!(notional(10, TokenId::B, &pa, None), Err(ModelError::MissingPriceHint));
        assert_eq!(notional(u64::MAX, TokenId::A, &r(2, 1), None), Err(ModelError::Overflow));
    }

    #[test]
    fn rational_parsing() {
        assert_eq!(parse_rational("1.21").unwrap(), r(121, 100));
        assert_eq!(parse_rational("3/2").unwrap(), r(3, 2));
        assert_eq!(parse_rational("4").unwrap(), r(4, 1));
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("x").is_err());
        assert!("0.5".parse::<Width>().is_err());
        assert_eq!("ANY".parse::<Width>().unwrap(), Width::Any);
    }

    #[test]
    fn serde_shapes() {
        let o = Order { tkn: TokenId::B, size: 3, price: PriceSpec::Mkt, width_req: "1.1".parse().unwrap() };
        let s = serde_json::to_string(&o).unwrap();
        assert_eq!(s, r#"{"tkn":"b","size":3,"price":"mkt","width_req":"11/10"}"#);
        assert_eq!(serde_json::from_str::<Order>(&s).unwrap(), o);
        assert_eq!(serde_json::to_string(&PlayerId(4)).unwrap(), "\"P4\"");
        assert_eq!("protocol".parse::<PlayerId>().unwrap(), PlayerId::PROTOCOL);
        assert!("P0".parse::<PlayerId>().is_err());
    }

    #[test]
    fn e_mm_is_derived() {
        let p = ProtocolParams {
            e_client: 100,
            q_not: 1000,
            c: r(3, 2),
            f_r: 1,
            res_bounty: 5,
            min_tick: 1,
            p_a: r(1, 1),
            t: 3,
            alpha: r(1, 2),
            f_mcf: r(121, 100),
            delta: r(1, 1),
            indicative_price: Price(100),
        };
        p.validate().unwrap();
        assert_eq!(p.e_mm().unwrap(), 1500);
        assert_eq!(p.t_eff().unwrap(), 6);
        let bad = ProtocolParams { c: r(1, 1), ..p };
        assert!(bad.validate().is_err());
    }
}
