//! What a public commit transcript reveals about its author.

use fairtradex_core::chain::{ChainState, PolicyKind, Sender, TxBody};
use fairtradex_core::membership::{check_proof, gen_secret, prove_membership};
use fairtradex_core::model::{Order, PlayerId, PriceSpec, TokenId, Width};
use fairtradex_core::protocol::commit_order;

fn shape(v: &serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(m) => m.iter().map(|(k, v)| (k.clone(), shape(v))).collect(),
        serde_json::Value::Array(a) => a.iter().map(shape).collect(),
        serde_json::Value::String(s) => serde_json::Value::from(s.len()),
        serde_json::Value::Number(_) => serde_json::Value::from("number"),
        other => other.clone(),
    }
}

#[test]
fn identical_orders_from_different_players_look_alike() {
    let players = [PlayerId(11), PlayerId(12), PlayerId(13), PlayerId(14)];
    let secrets: Vec<_> = (0..4).map(|i| gen_secret(100 + i)).collect();
    let ids: Vec<_> = secrets.iter().map(|s| s.reg_id()).collect();
    let order = Order { tkn: TokenId::A, size: 500, price: PriceSpec::Mkt, width_req: Width::Any };
    let com = commit_order(&order);

    let mut chain = ChainState::new(2, PolicyKind::Identity, 1);
    chain.register_relayer(PlayerId(99));
    for i in [0usize, 1] {
        let proof = prove_membership(&secrets[i], &ids, &com.0).unwrap();
        chain.relay(TxBody::CommitClient { com, proof }, |c, p| check_proof(p, &p.root, &c.0)).unwrap();
    }
    let block = chain.advance_block();
    assert_eq!(block.len(), 2);
    let json: Vec<serde_json::Value> = block.iter().map(|t| serde_json::to_value(&t.tx).unwrap()).collect();
    // Same fields, same lengths, same commitment, no sender.
    assert_eq!(shape(&json[0]), shape(&json[1]));
    for (inc, v) in block.iter().zip(&json) {
        assert_eq!(inc.tx.sender, Sender::Relayed);
        assert_eq!(v["body"]["commit_client"]["com"], serde_json::to_value(com).unwrap());
        let text = v.to_string();
        for p in players {
            assert!(!text.contains(&format!("\"{p}\"")));
            assert!(!text.contains(&hex::encode(p.to_bytes())));
        }
    }
    let (TxBody::CommitClient { proof: p0, .. }, TxBody::CommitClient { proof: p1, .. }) = (&block[0].tx.body, &block[1].tx.body)
    else {
        panic!("commit bodies expected");
    };
    assert_eq!(p0.root, p1.root);
    assert_eq!(p0.to_bytes().len(), p1.to_bytes().len());
    // Simulation caveat: the clear-text Merkle path and opening still tell the two apart.
    assert_ne!(p0.leaf_index, p1.leaf_index);
}
