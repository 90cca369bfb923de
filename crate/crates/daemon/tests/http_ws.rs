use std::net::SocketAddr;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use randlock_core::protocol::{run_with_decisions, Decision, DecisionKind, Flow, RunOptions, SessionConfig};
use randlock_core::transcript::{replay, Transcript};
use randlock_daemon::{bind, serve, AppState, DaemonError};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

async fn start() -> SocketAddr {
    let listener = bind(0).await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, AppState::new(), Duration::from_millis(20)));
    addr
}

async fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.unwrap();
    let raw = String::from_utf8(raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(head.to_ascii_lowercase().contains("access-control-allow-origin: *"), "{head}");
    (status, serde_json::from_str(body).unwrap_or(Value::Null))
}

async fn create(addr: SocketAddr, body: Value) -> String {
    let (status, v) = http(addr, "POST", "/session", Some(&body)).await;
    assert_eq!(status, 201, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn connect(addr: SocketAddr, id: &str, role: &str, since: usize) -> Ws {
    let url = format!("ws://{addr}/session/{id}/ws?role={role}&since={since}");
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn next(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("frame in time").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn until(ws: &mut Ws, pred: impl Fn(&Value) -> bool) -> Value {
    loop {
        let f = next(ws).await;
        if pred(&f) {
            return f;
        }
    }
}

fn pending_is(kind: &'static str) -> impl Fn(&Value) -> bool {
    move |f| f["kind"] == "state" && f["view"]["pending"] == kind
}

fn finished(f: &Value) -> bool {
    f["kind"] == "state" && f["view"]["finished"] == true
}

async fn act(ws: &mut Ws, action: Value) -> Value {
    ws.send(Message::Text(action.to_string())).await.unwrap();
    until(ws, |f| f["kind"] == "ack" || f["kind"] == "error").await
}

async fn play(addr: SocketAddr, seed: &str, x: usize, y: usize) -> (String, Value, Value) {
    let id = create(addr, json!({ "flow": "thimbles", "n": 2, "seed": seed })).await;
    let mut alice = connect(addr, &id, "alice", 0).await;
    let mut bob = connect(addr, &id, "bob", 0).await;
    let hello = next(&mut bob).await;
    assert_eq!(hello, json!({ "kind": "hello", "session_id": id, "role": "accepter" }));

    until(&mut alice, pending_is("hide")).await;
    assert_eq!(act(&mut alice, json!({ "action": "choose", "index": x })).await["kind"], "ack");
    until(&mut bob, pending_is("guess")).await;
    assert_eq!(act(&mut bob, json!({ "action": "choose", "index": y })).await["kind"], "ack");
    until(&mut alice, pending_is("reveal")).await;
    assert_eq!(act(&mut alice, json!({ "action": "reveal" })).await["kind"], "ack");
    let a = until(&mut alice, finished).await;
    let b = until(&mut bob, finished).await;
    assert_eq!(a["view"]["accepter_won"], b["view"]["accepter_won"]);
    (id, a["view"].clone(), b["view"].clone())
}

#[tokio::test]
async fn matching_guess_wins_and_transcript_replays() {
    let addr = start().await;
    let (id, _, bob) = play(addr, "ws/win", 2, 2).await;
    assert_eq!(bob["accepter_won"], true);
    assert_eq!(bob["my_choice"], 2);

    let (status, t) = http(addr, "GET", &format!("/session/{id}/transcript"), None).await;
    assert_eq!(status, 200);
    let t: Transcript = serde_json::from_value(t).unwrap();
    let deposit = SessionConfig::new(Flow::Thimbles, "x").deposit();
    assert_eq!(t.report.balances.accepter, 2 * deposit);
    assert_eq!(t.report.balances.challenger, 0);
    let summary = replay(&t).unwrap();
    assert!(summary.envelopes > 0 && !summary.reexecuted);
}

#[tokio::test]
async fn wrong_guess_loses() {
    let addr = start().await;
    let (id, alice, bob) = play(addr, "ws/lose", 1, 2).await;
    assert_eq!(bob["accepter_won"], false);
    assert_eq!(alice["accepter_won"], false);
    let (_, t) = http(addr, "GET", &format!("/session/{id}/transcript"), None).await;
    assert_eq!(t["report"]["winner"], "challenger");
}

#[tokio::test]
async fn http_errors() {
    let addr = start().await;
    let unknown = "00".repeat(16);
    assert_eq!(http(addr, "GET", &format!("/session/{unknown}/state?role=bob"), None).await.0, 404);
    assert_eq!(http(addr, "GET", "/session/nothex/transcript", None).await.0, 404);

    let id = create(addr, json!({ "flow": "oprand", "n": 3, "seed": "errs" })).await;
    let (status, v) = http(addr, "GET", &format!("/session/{id}/state?role=mallory"), None).await;
    assert_eq!(status, 400);
    assert!(v["error"].as_str().unwrap().contains("mallory"));

    assert_eq!(http(addr, "POST", "/session", Some(&json!({ "flow": "dice" }))).await.0, 400);
    assert_eq!(http(addr, "POST", "/session", Some(&json!({ "flow": "thimbles", "n": 1, "seed": "s" }))).await.0, 400);
    assert_eq!(http(addr, "POST", "/session", Some(&json!({ "flow": "trace", "seed": "s" }))).await.0, 400);
    // Same seed, same session id.
    assert_eq!(http(addr, "POST", "/session", Some(&json!({ "flow": "oprand", "n": 3, "seed": "errs" }))).await.0, 400);
    // No seed: the daemon picks fresh ones.
    let a = create(addr, json!({ "flow": "oprand" })).await;
    let b = create(addr, json!({ "flow": "oprand" })).await;
    assert_ne!(a, b);
}

#[tokio::test]
async fn accepter_view_holds_no_challenger_secrets() {
    let addr = start().await;
    let seed = "ws/secrets";
    let id = create(addr, json!({ "flow": "thimbles", "n": 2, "seed": seed })).await;
    let mut alice = connect(addr, &id, "challenger", 0).await;
    until(&mut alice, pending_is("hide")).await;
    act(&mut alice, json!({ "action": "choose", "index": 1 })).await;

    let (status, view) = http(addr, "GET", &format!("/session/{id}/state?role=bob"), None).await;
    assert_eq!(status, 200);
    assert_eq!(view["pending"], "guess");
    assert_eq!(view["h_list"].as_array().unwrap().len(), 2);
    assert!(view["my_choice"].is_null());

    // Same config and choice in process yields the same secrets.
    let mut cfg = SessionConfig::new(Flow::Thimbles, seed);
    cfg.n = 2;
    let local = run_with_decisions(&cfg, RunOptions::default(), |_, kind| (kind != DecisionKind::Reveal).then_some(Decision::Choose(0))).unwrap();
    let text = view.to_string();
    let secrets = local.parties[0].secret_material();
    assert!(!secrets.is_empty());
    for s in secrets {
        let hex = serde_json::to_value(s).unwrap();
        assert!(!text.contains(hex.as_str().unwrap()), "secret {hex} leaked into {text}");
    }
}

#[tokio::test]
async fn reconnect_resumes_from_index() {
    let addr = start().await;
    let (id, _, _) = play(addr, "ws/resume", 1, 1).await;
    let mut ws = connect(addr, &id, "bob", 3).await;
    assert_eq!(next(&mut ws).await["kind"], "hello");
    let first = next(&mut ws).await;
    assert_eq!(first["kind"], "event");
    assert_eq!(first["index"], 3);
    let mut last = 3;
    loop {
        let f = next(&mut ws).await;
        if f["kind"] == "state" {
            assert_eq!(f["view"]["finished"], true);
            break;
        }
        last += 1;
        assert_eq!(f["index"], last);
    }
    let (_, t) = http(addr, "GET", &format!("/session/{id}/transcript"), None).await;
    assert_eq!(t["events"].as_array().unwrap().len(), last + 1);
}

#[tokio::test]
async fn out_of_phase_actions_are_rejected() {
    let addr = start().await;
    let id = create(addr, json!({ "flow": "thimbles", "n": 2, "seed": "ws/phase" })).await;
    let mut bob = connect(addr, &id, "bob", 0).await;
    let r = act(&mut bob, json!({ "action": "choose", "index": 1 })).await;
    assert_eq!(r["kind"], "error");
    let r = act(&mut bob, json!({ "action": "dance" })).await;
    assert_eq!(r["kind"], "error");

    let mut alice = connect(addr, &id, "alice", 0).await;
    assert_eq!(act(&mut alice, json!({ "action": "choose", "index": 0 })).await["kind"], "error");
    assert_eq!(act(&mut alice, json!({ "action": "choose", "index": 3 })).await["kind"], "error");
    assert_eq!(act(&mut alice, json!({ "action": "reveal" })).await["kind"], "error");
    assert_eq!(act(&mut alice, json!({ "action": "choose", "index": 2 })).await["kind"], "ack");
    assert_eq!(act(&mut alice, json!({ "action": "choose", "index": 2 })).await["kind"], "error");
}

#[tokio::test]
async fn silent_accepter_times_out_into_reclaim() {
    let addr = start().await;
    let body = json!({ "flow": "thimbles", "n": 2, "seed": "ws/silent", "auto": ["challenger"], "deadline_ms": 150 });
    let id = create(addr, body).await;
    let mut alice = connect(addr, &id, "alice", 0).await;
    let done = until(&mut alice, finished).await;
    assert_eq!(done["view"]["abort"]["code"], "peer_timeout");

    let (_, t) = http(addr, "GET", &format!("/session/{id}/transcript"), None).await;
    let t: Transcript = serde_json::from_value(t).unwrap();
    let deposit = SessionConfig::new(Flow::Thimbles, "x").deposit();
    assert_eq!(t.report.balances.challenger, deposit);
    assert_eq!(t.report.balances.accepter, deposit);
    assert!(t.report.reclaimed);
    replay(&t).unwrap();
}

#[tokio::test]
async fn busy_port_is_reported() {
    let listener = bind(0).await.unwrap();
    let port = listener.local_addr().unwrap().port();
    assert!(matches!(bind(port).await, Err(DaemonError::PortInUse(p)) if p == port));
}
