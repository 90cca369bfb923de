use proptest::prelude::*;
use randlock_core::protocol::{run_local, Flow, Message, Role, SessionConfig};
use randlock_core::session_net::{canonical_bytes, Envelope, SessionId};
use serde_json::{Map, Value};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn thimbles_conserves_value_and_pays_the_right_side(seed in "[a-z0-9]{1,12}", x in 1usize..=3, y in 1usize..=3) {
        let mut cfg = SessionConfig::new(Flow::Thimbles, seed);
        cfg.n = 3;
        cfg.x = Some(x);
        cfg.y = Some(y);
        let r = run_local(&cfg).unwrap();
        let b = r.report.balances;
        prop_assert_eq!(b.challenger + b.accepter, 2 * cfg.deposit());
        prop_assert_eq!(r.report.accepter_won, Some(x == y));
        let winner = if x == y { Role::Accepter } else { Role::Challenger };
        prop_assert_eq!(b.of(winner), 2 * cfg.deposit());
    }

    #[test]
    fn oprand_both_sides_agree(seed in "[a-z0-9]{1,12}", n in 2usize..=6) {
        let mut cfg = SessionConfig::new(Flow::OpRand, seed);
        cfg.n = n;
        cfg.introspect = true;
        let r = run_local(&cfg).unwrap();
        let (x, y) = (r.report.x.unwrap(), r.report.y.unwrap());
        prop_assert_eq!(r.report.accepter_won, Some(x == y));
        prop_assert_eq!(r.party(Role::Challenger).verdict(), r.party(Role::Accepter).verdict());
    }
}

proptest! {
    #[test]
    fn any_payload_flip_breaks_the_digest(height in any::<u64>(), step in any::<u32>(), pos in any::<prop::sample::Index>(), bit in 0u8..4) {
        let env = Envelope::seal(SessionId([3; 16]), step, Role::Accepter, &Message::Advance { height });
        let mut bad = env.clone();
        let mut chars: Vec<u8> = bad.payload_hex.clone().into_bytes();
        let i = pos.index(chars.len());
        let digit = u8::from_str_radix(std::str::from_utf8(&chars[i..i + 1]).unwrap(), 16).unwrap() ^ (1 << bit);
        chars[i] = format!("{digit:x}").as_bytes()[0];
        bad.payload_hex = String::from_utf8(chars).unwrap();
        prop_assert!(bad.check().is_err());
        prop_assert!(env.check().is_ok());
    }

    #[test]
    fn canonical_form_ignores_key_order(entries in prop::collection::btree_map("[a-z]{1,6}", any::<i64>(), 0..8)) {
        let forward: Map<String, Value> = entries.iter().map(|(k, v)| (k.clone(), Value::from(*v))).collect();
        let backward: Map<String, Value> = entries.iter().rev().map(|(k, v)| (k.clone(), Value::from(*v))).collect();
        prop_assert_eq!(canonical_bytes(&Value::Object(forward)), canonical_bytes(&Value::Object(backward)));
    }
}
