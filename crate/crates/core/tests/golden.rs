//! Frozen vectors. Expected values are computed by hand or with sha2 directly,
//! never by calling the code under test.

use fairtradex_core::auction::{self, AuctionBook, ClearingClaim};
use fairtradex_core::digest::{Digest, HASH_KEY};
use fairtradex_core::membership::{self, MembershipProof, NullifierSet};
use fairtradex_core::model::{Market, OrderId, PlayerId, Price, Width};
use sha2::{Digest as _, Sha256};

fn fixture(name: &str) -> String {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn raw_h(parts: &[&[u8]]) -> [u8; 32] {
    let mut s = Sha256::new();
    s.update(HASH_KEY);
    for p in parts {
        s.update(p);
    }
    s.finalize().into()
}

fn hex32(s: &str) -> [u8; 32] {
    hex::decode(s).unwrap().try_into().unwrap()
}

#[test]
fn spanning_market_fixture_clears_at_the_bid() {
    let book: AuctionBook = serde_json::from_str(&fixture("book_mm_98_102.json")).unwrap();
    let (kept, removed) = book.filter_by_width();
    assert!(removed.is_empty());
    // Ticks 97..=103 by hand: at or below 98 the bid adds 1000 A, so one B
    // trades with imbalance 1050 - cp; above 98 the 50 A market buy cannot
    // afford a B atom. 98 is the smallest imbalance among volume-1 prices.
    let claim = auction::find_clearing_price(&kept).unwrap().unwrap();
    assert_eq!(claim, ClearingClaim { cp: Price(98), volume_b: 1, imbalance_a: 952 });
    assert!(auction::verify_clearing_price(&kept, &claim));
    let r = auction::settle(&kept, &claim).unwrap();
    r.check_invariants().unwrap();
    let by_id = |id: u64| *r.fills.iter().find(|f| f.order_id == OrderId(id)).unwrap();
    // Market buy fills ahead of the limit bid; the single B atom goes to the
    // larger A spend.
    let f = by_id(0);
    assert_eq!((f.executed, f.received, f.refunded), (50, 1, 0));
    let f = by_id(2);
    assert_eq!((f.executed, f.received, f.refunded), (48, 0, 952));
    let f = by_id(1);
    assert_eq!((f.executed, f.received, f.refunded), (1, 98, 0));
    let f = by_id(3);
    assert_eq!((f.executed, f.received, f.refunded), (0, 0, 11));
}

#[test]
fn marginal_sells_split_by_largest_remainder() {
    let book: AuctionBook = serde_json::from_str(&fixture("book_sell_pro_rata.json")).unwrap();
    let claim = auction::find_clearing_price(&book).unwrap().unwrap();
    assert_eq!(claim, ClearingClaim { cp: Price(100), volume_b: 5, imbalance_a: -500 });
    let r = auction::settle(&book, &claim).unwrap();
    r.check_invariants().unwrap();
    // Quotas 1.5, 1.5, 2.0: floors (1, 1, 2), the spare atom to the first tie.
    let sells: Vec<(u64, u64, u64)> =
        (1..=3).map(|id| r.fills.iter().find(|f| f.order_id == OrderId(id)).unwrap()).map(|f| (f.executed, f.received, f.refunded)).collect();
    assert_eq!(sells, vec![(2, 200, 1), (1, 100, 2), (2, 200, 2)]);
    let buy = r.fills.iter().find(|f| f.order_id == OrderId(0)).unwrap();
    assert_eq!((buy.executed, buy.received, buy.refunded), (500, 5, 0));
}

#[test]
fn book_survives_json_roundtrip() {
    let book: AuctionBook = serde_json::from_str(&fixture("book_mm_98_102.json")).unwrap();
    assert_eq!(book.w_tight, "51/49".parse::<Width>().unwrap());
    let again: AuctionBook = serde_json::from_str(&serde_json::to_string(&book).unwrap()).unwrap();
    assert_eq!(book, again);
}

#[test]
fn membership_vectors() {
    let v: serde_json::Value = serde_json::from_str(&fixture("membership_vectors.json")).unwrap();
    let secrets: Vec<membership::Secret> = (1..=3).map(membership::gen_secret).collect();
    let mut ids = Vec::new();
    for (s, want) in secrets.iter().zip(v["secrets"].as_array().unwrap()) {
        assert_eq!(s.s, Digest(hex32(want["s"].as_str().unwrap())));
        assert_eq!(s.r, Digest(hex32(want["r"].as_str().unwrap())));
        let leaf = raw_h(&[&s.s.0, &s.r.0]);
        assert_eq!(leaf, hex32(want["reg_id"].as_str().unwrap()));
        assert_eq!(s.reg_id().0, leaf);
        ids.push(Digest(leaf));
    }
    // Three leaves pad to four by repeating the last.
    let left = raw_h(&[&ids[0].0, &ids[1].0]);
    let right = raw_h(&[&ids[2].0, &ids[2].0]);
    let root = raw_h(&[&left, &right]);
    assert_eq!(root, hex32(v["root"].as_str().unwrap()));
    assert_eq!(membership::accumulate(&ids).unwrap().0, root);
    assert_eq!(membership::accumulate(&ids[..1]).unwrap().0, raw_h(&[&ids[0].0, &ids[0].0]));
    assert_eq!(membership::accumulate(&ids[..2]).unwrap().0, left);

    let bytes = hex::decode(v["proof_of_second"].as_str().unwrap()).unwrap();
    let proof = MembershipProof::from_bytes(&bytes).unwrap();
    assert_eq!(proof.root.0, root);
    assert_eq!(proof.serial, secrets[1].s);
    assert_eq!(proof.leaf_index, 1);
    assert_eq!(proof.path, vec![ids[0], Digest(right)]);
    let fresh = membership::prove_membership(&secrets[1], &ids, b"order").unwrap();
    assert_eq!(fresh.to_bytes(), bytes);
    let mut used = NullifierSet::new();
    assert!(membership::verify_membership(&proof, &proof.root, b"order", &mut used));
    assert!(!membership::verify_membership(&proof, &proof.root, b"order", &mut used));
}

#[test]
fn tie_break_between_equal_widths() {
    let m1 = Market::new(Price(100), 5000, Price(110), 50).unwrap();
    let m2 = Market::new(Price(200), 5000, Price(220), 30).unwrap();
    let revealed = vec![(PlayerId(3), m1), (PlayerId(4), m2)];
    let mut seed_src = Vec::new();
    for (p, m) in &revealed {
        seed_src.extend_from_slice(&p.0.to_be_bytes());
        seed_src.extend_from_slice(&m.encode());
    }
    // The tie-break digests, recomputed here from the documented encoding,
    // decide the winner as big-endian integers.
    let seed = auction::tie_break_seed(&revealed);
    assert_eq!(seed.0, raw_h(&[b"tie-seed", &seed_src]));
    let digest = |p: PlayerId, m: &Market| raw_h(&[&seed.0, &p.0.to_be_bytes(), &m.encode()]);
    assert_eq!(auction::tie_break_digest(&seed, PlayerId(3), &m1).0, digest(PlayerId(3), &m1));
    let want = if digest(PlayerId(3), &m1) > digest(PlayerId(4), &m2) { PlayerId(3) } else { PlayerId(4) };
    let got = auction::select_tight_market(&revealed, |_, _| true).unwrap();
    assert_eq!(got.0, want);
    let reversed: Vec<_> = revealed.iter().rev().copied().collect();
    assert_ne!(auction::tie_break_seed(&reversed), seed);
    assert!(auction::select_tight_market(&[], |_, _| true).is_none());
}
