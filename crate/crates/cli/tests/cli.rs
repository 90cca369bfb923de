use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use randlock_core::fairness::FairnessReport;
use randlock_core::ledger::LedgerState;
use randlock_core::transcript::{Event, Transcript};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_randlock");

fn randlock(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("RANDLOCK_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn load(path: &Path) -> Transcript {
    Transcript::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn covenant_demo_confirms_three_transactions() {
    let dir = tempfile::tempdir().unwrap();
    let o = randlock(dir.path(), &["demo", "covenant", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("Bob extracts P_a"));
    let t = load(&dir.path().join("transcript.json"));
    let accepted = t.events.iter().filter(|e| matches!(e, Event::Tx { accepted: true, .. })).count();
    assert_eq!(accepted, 3);
}

#[test]
fn cheating_demo_exits_with_abort_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = randlock(dir.path(), &["demo", "thimbles", "--seed", "7", "--cheat", "challenger-bad-addr"]);
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    assert!(out.contains("ProofRejected") && out.contains("pi_a"), "{out}");
    assert!(out.contains("deposits reclaimed"));

    let o = randlock(dir.path(), &["demo", "thimbles", "--cheat", "nobody-cheats"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).contains("challenger-bad-addr"));
}

#[test]
fn oprand_demo_prints_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let o = randlock(dir.path(), &["demo", "oprand", "-n", "5", "--seed", "9", "--no-transcript"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("verdict: Bob guessed"));
    assert!(!dir.path().join("transcript.json").exists());

    let o = randlock(dir.path(), &["demo", "oprand", "-n", "5", "--seed", "9", "--x", "3", "--y", "3", "--introspect", "--json", "--no-transcript"]);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["accepter_won"], true);
    assert_eq!((report["x"].as_u64(), report["y"].as_u64()), (Some(3), Some(3)));
}

#[test]
fn replay_accepts_fresh_and_rejects_flipped_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    randlock(dir.path(), &["demo", "thimbles", "--seed", "7", "--transcript", "t.json"]);
    let o = randlock(dir.path(), &["replay", "t.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ok:"));

    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    let events = doc["events"].as_array_mut().unwrap();
    let index = events.iter().rposition(|e| e["kind"] == "envelope").unwrap();
    let hex = events[index]["envelope"]["payload_hex"].as_str().unwrap().to_string();
    let flipped = format!("{}{}", if hex.starts_with('7') { "6" } else { "7" }, &hex[1..]);
    events[index]["envelope"]["payload_hex"] = Value::String(flipped);
    std::fs::write(dir.path().join("bad.json"), doc.to_string()).unwrap();
    let o = randlock(dir.path(), &["replay", "bad.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&format!("event {index}")), "{}", stderr(&o));

    std::fs::write(dir.path().join("junk.json"), "{").unwrap();
    assert_eq!(randlock(dir.path(), &["replay", "junk.json"]).status.code(), Some(3));
    assert_eq!(randlock(dir.path(), &["replay", "missing.json"]).status.code(), Some(1));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    randlock(dir.path(), &["demo", "thimbles", "--seed", "env-seed", "--transcript", "flag.json"]);
    let o = Command::new(BIN)
        .args(["demo", "thimbles", "--transcript", "env.json"])
        .env("RANDLOCK_SEED", "env-seed")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let a = std::fs::read(dir.path().join("flag.json")).unwrap();
    let b = std::fs::read(dir.path().join("env.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fairness_summary_replays() {
    let dir = tempfile::tempdir().unwrap();
    let o = randlock(dir.path(), &["fairness", "--sessions", "40", "--seed", "f", "--out", "sum.json"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("x=1  W -") && stdout(&o).contains("x=2  - W"), "{}", stdout(&o));
    let sum: FairnessReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sum.json")).unwrap()).unwrap();
    assert_eq!(sum.matrix_wins(), 2);
    assert_eq!(randlock(dir.path(), &["replay", "sum.json"]).status.code(), Some(0));

    let mut bad = sum.clone();
    bad.accepter_wins = bad.sessions - bad.accepter_wins;
    std::fs::write(dir.path().join("bad.json"), serde_json::to_string(&bad).unwrap()).unwrap();
    assert_eq!(randlock(dir.path(), &["replay", "bad.json"]).status.code(), Some(3));

    let o = randlock(dir.path(), &["fairness", "--sessions", "1", "--json"]);
    let one: FairnessReport = serde_json::from_slice(&o.stdout).unwrap();
    assert!(one.rate == 0.0 || one.rate == 1.0);
    assert_eq!(randlock(dir.path(), &["fairness", "--sessions", "0"]).status.code(), Some(64));
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["demo"][..],
        &["demo", "dice"],
        &["demo", "thimbles", "--bogus"],
        &["demo", "thimbles", "--depth", "3"],
        &["demo", "trace", "--x", "1"],
        &["demo", "thimbles", "-n", "1"],
        &["demo", "thimbles", "--transcript", "a.json", "--no-transcript"],
        &["trace", "build", "--fn", "pow:2"],
        &["host", "--flow", "trace"],
        &["nonsense"],
    ] {
        let o = randlock(dir.path(), args);
        assert_eq!(o.status.code(), Some(64), "{args:?}: {}", stderr(&o));
    }
    let o = randlock(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("replay"));
}

#[test]
fn ledger_dump_renders() {
    let dir = tempfile::tempdir().unwrap();
    randlock(dir.path(), &["demo", "covenant", "--seed", "7", "--ledger", "l.json", "--no-transcript"]);
    let o = randlock(dir.path(), &["ledger", "inspect", "l.json"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("height 0"));
    let o = randlock(dir.path(), &["ledger", "inspect", "l.json", "--json"]);
    let ledger: LedgerState = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(ledger.log().len(), 3);
    std::fs::write(dir.path().join("bad.json"), r#"{"v":9}"#).unwrap();
    assert_eq!(randlock(dir.path(), &["ledger", "inspect", "bad.json"]).status.code(), Some(3));
}

#[test]
fn trace_build_spend_verify() {
    let dir = tempfile::tempdir().unwrap();
    let params = ["--seed", "tr", "--depth", "3", "--fn", "mul:3", "--fn", "add:2"];
    let build = randlock(dir.path(), &[&["trace", "build"][..], &params].concat());
    assert_eq!(build.status.code(), Some(0), "{}", stderr(&build));
    let commitments: Value = serde_json::from_slice(&build.stdout).unwrap();
    assert_eq!(commitments["layers"].as_array().unwrap().len(), 4);
    assert!(!String::from_utf8_lossy(&build.stdout).contains("\"state\""));

    let spend = randlock(dir.path(), &[&["trace", "spend", "--path", "212", "--out", "run.json", "--commitments", "c.json"][..], &params].concat());
    assert_eq!(spend.status.code(), Some(0), "{}", stderr(&spend));
    assert!(stdout(&spend).contains("verify_trace true"));
    let written: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(written, commitments);
    assert_eq!(randlock(dir.path(), &["trace", "verify", "--commitments", "c.json", "--run", "run.json"]).status.code(), Some(0));

    // Commitments from another seed do not match the spends.
    let other = randlock(dir.path(), &["trace", "build", "--seed", "other", "--depth", "3", "--fn", "mul:3", "--fn", "add:2", "--out", "o.json"]);
    assert_eq!(other.status.code(), Some(0));
    assert_eq!(randlock(dir.path(), &["trace", "verify", "--commitments", "o.json", "--run", "run.json"]).status.code(), Some(3));

    let deferred = randlock(dir.path(), &[&["trace", "build", "--defer-state"][..], &params].concat());
    let deferred: Value = serde_json::from_slice(&deferred.stdout).unwrap();
    assert!(deferred["state_lock"].is_null() && !commitments["state_lock"].is_null());

    let o = randlock(dir.path(), &["demo", "trace", "--seed", "tr", "--path", "21", "--transcript", "t.json"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&randlock(dir.path(), &["replay", "t.json"])).contains("trace verified"));
}

fn spawn(dir: &Path, args: &[&str]) -> Child {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("RANDLOCK_SEED")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap()
}

/// Reads stderr up to the line announcing the listening address.
fn address(child: &mut Child, marker: &str) -> String {
    let mut err = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    loop {
        line.clear();
        assert!(err.read_line(&mut line).unwrap() > 0, "child exited before listening");
        if let Some((_, rest)) = line.split_once(marker) {
            return rest.trim().to_string();
        }
    }
}

#[test]
fn host_and_join_over_tcp_match_the_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut host = spawn(dir.path(), &["host", "--flow", "thimbles", "--port", "0", "--seed", "net", "--transcript", "host.json"]);
    let addr = address(&mut host, "waiting on ");
    let join = randlock(dir.path(), &["join", "--connect", &addr, "--seed", "net", "--transcript", "join.json"]);
    let host = host.wait_with_output().unwrap();
    assert_eq!(join.status.code(), Some(0), "{}", stderr(&join));
    assert_eq!(host.status.code(), Some(0));
    randlock(dir.path(), &["demo", "thimbles", "--seed", "net", "--transcript", "local.json"]);

    let (h, j, l) = (load(&dir.path().join("host.json")), load(&dir.path().join("join.json")), load(&dir.path().join("local.json")));
    assert_eq!(h.session_id, l.session_id);
    let digests = |t: &Transcript| {
        let mut d = t.digests();
        d.sort();
        d
    };
    assert_eq!(digests(&h), digests(&l));
    assert_eq!(digests(&j), digests(&l));
    assert_eq!(h.report.accepter_won, l.report.accepter_won);
    assert_eq!(h.report.balances, l.report.balances);
    for f in ["host.json", "join.json"] {
        assert_eq!(randlock(dir.path(), &["replay", f]).status.code(), Some(0), "{f}");
    }
}

#[test]
fn busy_port_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = randlock(dir.path(), &["host", "--port", &port]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
}

#[test]
fn daemon_serves_the_session_api() {
    let dir = tempfile::tempdir().unwrap();
    let mut daemon = spawn(dir.path(), &["daemon", "--port", "0"]);
    let url = address(&mut daemon, "listening on ");
    let addr = url.trim_start_matches("http://");
    let body = r#"{"flow":"thimbles","seed":"cli"}"#;
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "POST /session HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}", body.len()).unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    daemon.kill().unwrap();
    daemon.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 201"), "{resp}");
    assert!(resp.contains("\"session_id\""));
}
