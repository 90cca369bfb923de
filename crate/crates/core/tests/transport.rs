use std::thread;
use std::time::Duration;

use randlock_core::protocol::{run_local, AbortCode, Cheat, Flow, Message, Role, SessionConfig, SessionStatus};
use randlock_core::session_net::{
    duplex, run_host, run_join, Envelope, PeerOptions, PeerRun, TcpTransport, Transport, ENVELOPE_SCHEMA,
};
use randlock_core::transcript::{replay, Event, Transcript, TRANSCRIPT_SCHEMA};
use serde_json::Value;

fn opts(ms: u64) -> PeerOptions {
    PeerOptions { deadline: Duration::from_millis(ms) }
}

fn per_sender(t: &Transcript, role: Role) -> Vec<String> {
    t.envelopes().filter(|e| e.sender == role).map(|e| e.digest.to_hex()).collect()
}

fn over_channels(host_cfg: SessionConfig, join_cfg: SessionConfig, deadline: PeerOptions) -> (PeerRun, PeerRun) {
    let (mut a, mut b) = duplex(Duration::from_millis(1));
    let host = thread::spawn(move || run_host(&host_cfg, &mut a, deadline).unwrap());
    let join = run_join(&join_cfg, &mut b, deadline).unwrap();
    (host.join().unwrap(), join)
}

fn over_tcp(host_cfg: SessionConfig, join_cfg: SessionConfig) -> (PeerRun, PeerRun) {
    let listener = TcpTransport::bind("127.0.0.1:0".parse().unwrap()).unwrap();
    let addr = listener.local_addr().unwrap();
    let host = thread::spawn(move || {
        let mut t = TcpTransport::accept_one(&listener).unwrap();
        run_host(&host_cfg, &mut t, opts(5000)).unwrap()
    });
    let mut t = TcpTransport::connect(addr).unwrap();
    let join = run_join(&join_cfg, &mut t, opts(5000)).unwrap();
    (host.join().unwrap(), join)
}

fn assert_transparent(local: &Transcript, host: &Transcript, join: &Transcript) {
    for role in Role::BOTH {
        let expected = per_sender(local, role);
        assert_eq!(per_sender(host, role), expected, "{role} as seen by the host");
        assert_eq!(per_sender(join, role), expected, "{role} as seen by the joiner");
    }
    assert_eq!(host.report.balances, local.report.balances);
    assert_eq!(join.report.balances, local.report.balances);
    assert_eq!(host.report.accepter_won, local.report.accepter_won);
    assert_eq!(join.report.accepter_won, local.report.accepter_won);
}

#[test]
fn socket_transports_change_no_digests() {
    for flow in [Flow::Covenant, Flow::OpRand, Flow::Thimbles] {
        for seed in ["7", "transparent"] {
            let cfg = SessionConfig::new(flow, seed);
            let local = run_local(&cfg).unwrap().transcript.unwrap();
            let (h, j) = over_channels(cfg.clone(), SessionConfig::new(Flow::Thimbles, seed), opts(5000));
            assert_transparent(&local, &h.transcript, &j.transcript);
            let (h, j) = over_tcp(cfg.clone(), SessionConfig::new(Flow::Thimbles, seed));
            assert_transparent(&local, &h.transcript, &j.transcript);
            replay(&h.transcript).unwrap();
            replay(&j.transcript).unwrap();
        }
    }
}

#[test]
fn transparent_under_abort_paths() {
    for cheat in [Cheat::ChallengerBadAddr, Cheat::AccepterNoKey, Cheat::ChallengerRefuse] {
        let mut cfg = SessionConfig::new(Flow::Thimbles, "abort");
        let mut join_cfg = cfg.clone();
        if cheat.cheater() == Role::Challenger {
            cfg.cheat = Some(cheat);
        } else {
            join_cfg.cheat = Some(cheat);
        }
        let mut both = cfg.clone();
        both.cheat = Some(cheat);
        let local = run_local(&both).unwrap().transcript.unwrap();
        let (h, j) = over_channels(cfg, join_cfg, opts(5000));
        assert_eq!(h.transcript.report.status, SessionStatus::Aborted, "{cheat}");
        assert_transparent(&local, &h.transcript, &j.transcript);
    }
}

#[test]
fn stalled_joiner_triggers_timeout_and_reclaim() {
    let cfg = SessionConfig::new(Flow::Thimbles, "stall");
    let mut join_cfg = cfg.clone();
    join_cfg.cheat = Some(Cheat::AccepterStall);
    let (h, j) = over_channels(cfg.clone(), join_cfg, opts(150));
    let abort = h.transcript.report.abort.clone().unwrap();
    assert_eq!((abort.by, abort.code), (Role::Challenger, AbortCode::PeerTimeout));
    assert!(h.transcript.events.iter().any(|e| matches!(e, Event::Timeout { role: Role::Challenger, .. })));
    assert!(h.transcript.report.height >= cfg.t1);
    for t in [&h.transcript, &j.transcript] {
        assert_eq!(t.report.balances.challenger, cfg.deposit());
        assert_eq!(t.report.balances.accepter, cfg.deposit());
    }
    assert!(h.party.is_finished() && j.party.is_finished());
}

#[test]
fn vanished_host_leaves_joiner_reclaiming() {
    let cfg = SessionConfig::new(Flow::Thimbles, "vanish");
    let (mut a, mut b) = duplex(Duration::ZERO);
    let host = thread::spawn(move || {
        // Say hello, read the reply, then disappear.
        let session = cfg.session_id();
        let p = randlock_core::protocol::make_party(&cfg, Role::Challenger, cfg.party_seed(Role::Challenger), session).unwrap();
        let mut p = p;
        for out in p.start() {
            a.send(&Envelope::seal(session, out.step, Role::Challenger, &out.msg)).unwrap();
        }
        a.recv(Duration::from_secs(5)).unwrap();
    });
    let j = run_join(&SessionConfig::new(Flow::Thimbles, "vanish"), &mut b, opts(200)).unwrap();
    host.join().unwrap();
    let abort = j.transcript.report.abort.clone().unwrap();
    assert_eq!((abort.by, abort.code), (Role::Accepter, AbortCode::PeerTimeout));
    assert!(j.party.is_finished());
    assert_eq!(j.transcript.report.balances.accepter, j.transcript.config.deposit());
}

#[test]
fn tampered_envelope_aborts_the_receiver() {
    let cfg = SessionConfig::new(Flow::Thimbles, "tamper");
    let (mut a, mut b) = duplex(Duration::ZERO);
    let host = thread::spawn(move || run_host(&cfg, &mut a, opts(300)).unwrap());
    let hello = b.recv(Duration::from_secs(5)).unwrap();
    let Message::Hello { wallet, .. } = hello.message().unwrap() else { panic!("expected hello") };
    let reply = Envelope::seal(hello.session_id, 0, Role::Accepter, &Message::Hello { wallet, params: None });
    let mut line = reply.to_line();
    // Flip one hex digit of the payload.
    let at = line.find("\"payload_hex\":\"").unwrap() + 16;
    let flipped = if &line[at..at + 1] == "0" { "1" } else { "0" };
    line.replace_range(at..at + 1, flipped);
    b.send_raw(line).unwrap();
    drop(b);
    let h = host.join().unwrap();
    assert!(h.transcript.events.iter().any(|e| matches!(e, Event::Rejected { reason, .. } if reason.contains("digest"))));
    assert_eq!(h.transcript.report.abort.unwrap().code, AbortCode::BadMessage);
    assert!(h.party.is_finished());
}

#[test]
fn wire_envelopes_validate_against_the_schema() {
    let schema: Value = serde_json::from_str(ENVELOPE_SCHEMA).unwrap();
    let env_validator = jsonschema::JSONSchema::compile(&schema).unwrap();
    let tschema: Value = serde_json::from_str(TRANSCRIPT_SCHEMA).unwrap();
    let t_validator = jsonschema::JSONSchema::options()
        .with_document("https://randlock.invalid/schema/envelope-v1.json".into(), schema.clone())
        .compile(&tschema)
        .unwrap();
    let mut configs: Vec<SessionConfig> = [Flow::Covenant, Flow::OpRand, Flow::Thimbles].map(|f| SessionConfig::new(f, "schema")).to_vec();
    for cheat in Cheat::ALL {
        let mut c = SessionConfig::new(Flow::Thimbles, "schema");
        c.cheat = Some(cheat);
        configs.push(c);
    }
    let mut seen = std::collections::BTreeSet::new();
    for cfg in configs {
        let t = run_local(&cfg).unwrap().transcript.unwrap();
        for env in t.envelopes() {
            let v: Value = serde_json::from_str(&env.to_line()).unwrap();
            assert!(env_validator.is_valid(&v), "{}", env.kind);
            seen.insert(env.kind.clone());
        }
        let v: Value = serde_json::from_str(&t.to_json()).unwrap();
        if let Err(errors) = t_validator.validate(&v) {
            let msgs: Vec<String> = errors.map(|e| format!("{e} at {}", e.instance_path)).collect();
            panic!("transcript invalid: {msgs:?}");
        };
    }
    let trace = randlock_core::protocol::trace::run(&SessionConfig::new(Flow::Trace, "schema")).unwrap();
    for env in trace.transcript.envelopes() {
        let v: Value = serde_json::from_str(&env.to_line()).unwrap();
        assert!(env_validator.is_valid(&v));
        seen.insert(env.kind.clone());
    }
    assert!(seen.len() >= 14, "{seen:?}");
    // Something off-schema is caught.
    let bad = serde_json::json!({"session_id": "00", "step": 1, "sender": "carol", "type": "x", "payload_hex": "0", "digest": ""});
    assert!(!env_validator.is_valid(&bad));
}
