//! Envelopes and transports.
//!
//! Envelopes travel as one JSON object per line. The payload is the message
//! body as canonical JSON (object keys sorted, no whitespace), hex encoded,
//! and the digest covers every other field.

use std::fmt;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::group::sha256_parts;
use crate::ledger::Digest32;
use crate::protocol::{make_party, AbortCode, Message, Out, Party, ProtocolError, Role, SessionConfig};
use crate::transcript::{Origin, Recorder, Transcript};

const ENVELOPE_TAG: &[u8] = b"randlock/envelope/v1";

/// JSON schema every envelope on the wire satisfies.
pub const ENVELOPE_SCHEMA: &str = include_str!("../schema/envelope.schema.json");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("peer timed out")]
    PeerTimeout,
    #[error("envelope digest mismatch at step {step} from {sender}")]
    DigestMismatch { step: u32, sender: Role },
    #[error("unknown session {0}")]
    SessionUnknown(String),
    #[error("connection closed")]
    Closed,
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("port {0} is in use")]
    PortInUse(u16),
    #[error("i/o: {0}")]
    Io(String),
}

/// 16-byte session identifier, hex encoded on the wire.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub [u8; 16]);

impl SessionId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({self})")
    }
}

impl FromStr for SessionId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        Ok(SessionId(bytes.try_into().map_err(|_| "session id must be 16 bytes".to_string())?))
    }
}

impl Serialize for SessionId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Rebuilds every object with sorted keys.
pub fn canonical(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonical(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

pub fn canonical_bytes(value: &Value) -> Vec<u8> {
    serde_json::to_vec(&canonical(value)).expect("json values serialize")
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub session_id: SessionId,
    pub step: u32,
    pub sender: Role,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload_hex: String,
    pub digest: Digest32,
}

impl Envelope {
    pub fn seal(session_id: SessionId, step: u32, sender: Role, msg: &Message) -> Envelope {
        let Value::Object(mut obj) = serde_json::to_value(msg).expect("messages serialize") else {
            unreachable!("messages are tagged objects")
        };
        let kind = obj.remove("type").and_then(|v| v.as_str().map(str::to_string)).expect("tag present");
        let payload = obj.remove("payload").unwrap_or(Value::Object(Map::new()));
        let payload_hex = hex::encode(canonical_bytes(&payload));
        let mut env = Envelope { session_id, step, sender, kind, payload_hex, digest: Digest32([0; 32]) };
        env.digest = env.compute_digest();
        env
    }

    pub fn compute_digest(&self) -> Digest32 {
        Digest32(sha256_parts(&[
            ENVELOPE_TAG,
            &self.session_id.0,
            &self.step.to_be_bytes(),
            self.sender.name().as_bytes(),
            &[0],
            self.kind.as_bytes(),
            &[0],
            self.payload_hex.as_bytes(),
        ]))
    }

    pub fn check(&self) -> Result<(), NetError> {
        if self.compute_digest() != self.digest {
            return Err(NetError::DigestMismatch { step: self.step, sender: self.sender });
        }
        Ok(())
    }

    /// The decoded payload.
    pub fn payload(&self) -> Result<Value, NetError> {
        let bytes = hex::decode(&self.payload_hex).map_err(|e| NetError::Malformed(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| NetError::Malformed(e.to_string()))
    }

    pub fn message(&self) -> Result<Message, NetError> {
        let mut obj = Map::new();
        obj.insert("type".into(), Value::String(self.kind.clone()));
        obj.insert("payload".into(), self.payload()?);
        serde_json::from_value(Value::Object(obj)).map_err(|e| NetError::Malformed(e.to_string()))
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelopes serialize")
    }

    pub fn from_line(line: &str) -> Result<Envelope, NetError> {
        serde_json::from_str(line.trim_end()).map_err(|e| NetError::Malformed(e.to_string()))
    }
}

/// Ordered, reliable, exactly-once delivery in each direction.
pub trait Transport: Send {
    fn send(&mut self, env: &Envelope) -> Result<(), NetError>;
    /// The next envelope, checked for digest and session.
    fn recv(&mut self, deadline: Duration) -> Result<Envelope, NetError>;
}

/// Binds a transport to the first session id it sees.
#[derive(Default)]
struct SessionGuard(Option<SessionId>);

impl SessionGuard {
    fn admit(&mut self, env: Envelope) -> Result<Envelope, NetError> {
        env.check()?;
        match self.0 {
            Some(id) if id != env.session_id => Err(NetError::SessionUnknown(env.session_id.to_hex())),
            Some(_) => Ok(env),
            None => {
                self.0 = Some(env.session_id);
                Ok(env)
            }
        }
    }
}

/// In-process transport over channels, with optional delivery latency.
pub struct ChannelTransport {
    tx: mpsc::Sender<(Instant, String)>,
    rx: mpsc::Receiver<(Instant, String)>,
    latency: Duration,
    guard: SessionGuard,
}

/// A connected pair of in-process transports.
pub fn duplex(latency: Duration) -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        ChannelTransport { tx: a_tx, rx: a_rx, latency, guard: SessionGuard::default() },
        ChannelTransport { tx: b_tx, rx: b_rx, latency, guard: SessionGuard::default() },
    )
}

impl ChannelTransport {
    /// Expects envelopes for `id` only.
    pub fn bind(&mut self, id: SessionId) {
        self.guard.0 = Some(id);
    }

    /// Sends a raw line, bypassing envelope encoding.
    pub fn send_raw(&mut self, line: String) -> Result<(), NetError> {
        self.tx.send((Instant::now() + self.latency, line)).map_err(|_| NetError::Closed)
    }
}

impl Transport for ChannelTransport {
    fn send(&mut self, env: &Envelope) -> Result<(), NetError> {
        self.send_raw(env.to_line())
    }

    fn recv(&mut self, deadline: Duration) -> Result<Envelope, NetError> {
        let start = Instant::now();
        let (at, line) = self.rx.recv_timeout(deadline).map_err(|e| match e {
            mpsc::RecvTimeoutError::Timeout => NetError::PeerTimeout,
            mpsc::RecvTimeoutError::Disconnected => NetError::Closed,
        })?;
        let now = Instant::now();
        if at > now {
            if at - start > deadline {
                return Err(NetError::PeerTimeout);
            }
            std::thread::sleep(at - now);
        }
        self.guard.admit(Envelope::from_line(&line)?)
    }
}

/// Newline-delimited JSON envelopes over TCP.
pub struct TcpTransport {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    pending: Vec<u8>,
    guard: SessionGuard,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self, NetError> {
        stream.set_nodelay(true).map_err(io)?;
        let reader = BufReader::new(stream.try_clone().map_err(io)?);
        Ok(TcpTransport { writer: stream, reader, pending: Vec::new(), guard: SessionGuard::default() })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, NetError> {
        TcpTransport::new(TcpStream::connect(addr).map_err(io)?)
    }

    /// Binds `addr` and waits for one peer.
    pub fn accept_one(listener: &TcpListener) -> Result<Self, NetError> {
        let (stream, _) = listener.accept().map_err(io)?;
        TcpTransport::new(stream)
    }

    pub fn bind(addr: SocketAddr) -> Result<TcpListener, NetError> {
        TcpListener::bind(addr).map_err(|e| if e.kind() == ErrorKind::AddrInUse { NetError::PortInUse(addr.port()) } else { io(e) })
    }
}

fn io(e: std::io::Error) -> NetError {
    NetError::Io(e.to_string())
}

impl Transport for TcpTransport {
    fn send(&mut self, env: &Envelope) -> Result<(), NetError> {
        let mut line = env.to_line();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(|e| match e.kind() {
            ErrorKind::BrokenPipe | ErrorKind::ConnectionReset => NetError::Closed,
            _ => io(e),
        })
    }

    fn recv(&mut self, deadline: Duration) -> Result<Envelope, NetError> {
        let end = Instant::now() + deadline;
        loop {
            if let Some(pos) = self.pending.iter().position(|b| *b == b'\n') {
                let line: Vec<u8> = self.pending.drain(..=pos).collect();
                let text = String::from_utf8(line).map_err(|e| NetError::Malformed(e.to_string()))?;
                return self.guard.admit(Envelope::from_line(&text)?);
            }
            let left = end.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(NetError::PeerTimeout);
            }
            self.reader.get_ref().set_read_timeout(Some(left)).map_err(io)?;
            match self.reader.read_until(b'\n', &mut self.pending) {
                Ok(0) => return Err(NetError::Closed),
                Ok(_) => {}
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Err(NetError::PeerTimeout),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(io(e)),
            }
        }
    }
}

/// Result of driving one party over a transport.
pub struct PeerRun {
    pub transcript: Transcript,
    pub party: Box<dyn Party>,
}

/// Options for [`run_host`] and [`run_join`].
#[derive(Clone, Copy, Debug)]
pub struct PeerOptions {
    /// How long to wait for the peer before taking the abort path.
    pub deadline: Duration,
}

impl Default for PeerOptions {
    fn default() -> Self {
        PeerOptions { deadline: Duration::from_secs(30) }
    }
}

/// Runs the challenger side of `cfg` over `transport`.
pub fn run_host(cfg: &SessionConfig, transport: &mut dyn Transport, opts: PeerOptions) -> Result<PeerRun, ProtocolError> {
    let session = cfg.session_id();
    let party = make_party(cfg, Role::Challenger, cfg.party_seed(Role::Challenger), session)?;
    let recorder = Recorder::new(session, cfg.clone(), Origin::Host);
    drive(party, recorder, transport, None, opts)
}

/// Runs the accepter side. Flow parameters come from the host's hello;
/// `cfg` supplies the seed and any scripted choices or cheats.
pub fn run_join(cfg: &SessionConfig, transport: &mut dyn Transport, opts: PeerOptions) -> Result<PeerRun, ProtocolError> {
    let first = transport.recv(opts.deadline)?;
    let Message::Hello { params: Some(params), .. } = first.message()? else {
        return Err(NetError::Malformed(format!("expected session/hello, got {}", first.kind)).into());
    };
    let mut cfg = cfg.clone();
    cfg.apply_params(&params);
    let party = make_party(&cfg, Role::Accepter, cfg.party_seed(Role::Accepter), first.session_id)?;
    let recorder = Recorder::new(first.session_id, cfg, Origin::Join);
    drive(party, recorder, transport, Some(first), opts)
}

fn drive(
    mut party: Box<dyn Party>,
    mut recorder: Recorder,
    transport: &mut dyn Transport,
    first: Option<Envelope>,
    opts: PeerOptions,
) -> Result<PeerRun, ProtocolError> {
    let session = recorder.session_id();
    let role = party.role();
    let send = |outs: Vec<Out>, recorder: &mut Recorder, transport: &mut dyn Transport| {
        for out in outs {
            let env = Envelope::seal(session, out.step, role, &out.msg);
            recorder.record(&env);
            // A vanished peer is handled by the timeout path on the next recv.
            let _ = transport.send(&env);
        }
    };
    let outs = party.start();
    send(outs, &mut recorder, transport);
    let mut next = first;
    loop {
        while let Some(decision) = party.auto_decision() {
            let outs = party.decide(decision)?;
            send(outs, &mut recorder, transport);
        }
        if party.is_finished() {
            break;
        }
        let deadline = if party.is_stalled() { opts.deadline * 4 } else { opts.deadline };
        let received = match next.take() {
            Some(env) => Ok(env),
            None => transport.recv(deadline),
        };
        match received {
            Ok(env) => match env.message() {
                Ok(msg) => {
                    recorder.record(&env);
                    let outs = party.handle(&msg);
                    send(outs, &mut recorder, transport);
                }
                Err(e) => {
                    recorder.record_rejected(role, &e.to_string());
                    let outs = party.fail(AbortCode::BadMessage, &e.to_string());
                    send(outs, &mut recorder, transport);
                }
            },
            Err(e @ (NetError::PeerTimeout | NetError::Closed)) => {
                recorder.record_timeout(role, &e.to_string());
                let outs = party.on_timeout();
                send(outs, &mut recorder, transport);
                if e == NetError::Closed && !party.is_finished() {
                    // Nothing more can arrive; finish the abort path locally.
                    let outs = party.on_timeout();
                    send(outs, &mut recorder, transport);
                    break;
                }
            }
            Err(e) => {
                recorder.record_rejected(role, &e.to_string());
                let outs = party.fail(AbortCode::BadMessage, &e.to_string());
                send(outs, &mut recorder, transport);
            }
        }
    }
    let transcript = recorder.finish(&[party.as_ref()]);
    Ok(PeerRun { transcript, party })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Flow;

    fn sample() -> Envelope {
        let msg = Message::Advance { height: 12 };
        Envelope::seal(SessionId([7; 16]), 3, Role::Challenger, &msg)
    }

    #[test]
    fn seal_roundtrip() {
        let env = sample();
        env.check().unwrap();
        let back = Envelope::from_line(&env.to_line()).unwrap();
        assert_eq!(back, env);
        assert_eq!(back.message().unwrap(), Message::Advance { height: 12 });
    }

    #[test]
    fn tampered_digest_detected() {
        let mut env = sample();
        env.payload_hex = hex::encode(br#"{"height":13}"#);
        assert_eq!(env.check(), Err(NetError::DigestMismatch { step: 3, sender: Role::Challenger }));
        let mut env = sample();
        env.step = 4;
        assert!(env.check().is_err());
    }

    #[test]
    fn canonical_payload_is_key_sorted() {
        let v: Value = serde_json::from_str(r#"{"b":1,"a":{"d":2,"c":3}}"#).unwrap();
        assert_eq!(canonical_bytes(&v), br#"{"a":{"c":3,"d":2},"b":1}"#.to_vec());
    }

    #[test]
    fn channel_fifo_and_timeout() {
        let (mut a, mut b) = duplex(Duration::ZERO);
        let e1 = sample();
        let e2 = Envelope::seal(SessionId([7; 16]), 4, Role::Challenger, &Message::ThimblesPass {});
        a.send(&e1).unwrap();
        a.send(&e2).unwrap();
        assert_eq!(b.recv(Duration::from_millis(100)).unwrap(), e1);
        assert_eq!(b.recv(Duration::from_millis(100)).unwrap(), e2);
        assert_eq!(b.recv(Duration::from_millis(20)), Err(NetError::PeerTimeout));
    }

    #[test]
    fn channel_latency_and_session_binding() {
        let (mut a, mut b) = duplex(Duration::from_millis(30));
        b.bind(SessionId([1; 16]));
        a.send(&sample()).unwrap();
        assert_eq!(b.recv(Duration::from_millis(5)), Err(NetError::PeerTimeout));
        let (mut a, mut b) = duplex(Duration::from_millis(5));
        b.bind(SessionId([1; 16]));
        a.send(&sample()).unwrap();
        assert!(matches!(b.recv(Duration::from_millis(200)), Err(NetError::SessionUnknown(_))));
    }

    #[test]
    fn channel_rejects_tampered_line() {
        let (mut a, mut b) = duplex(Duration::ZERO);
        let env = sample();
        let flipped = hex::encode(br#"{"height":99}"#);
        let line = env.to_line().replace(&env.payload_hex, &flipped);
        a.send_raw(line).unwrap();
        assert!(matches!(b.recv(Duration::from_millis(100)), Err(NetError::DigestMismatch { .. })));
    }

    #[test]
    fn tcp_roundtrip() {
        let listener = TcpTransport::bind("127.0.0.1:0".parse().unwrap()).unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let mut t = TcpTransport::accept_one(&listener).unwrap();
            let env = t.recv(Duration::from_secs(5)).unwrap();
            t.send(&env).unwrap();
        });
        let mut c = TcpTransport::connect(addr).unwrap();
        c.send(&sample()).unwrap();
        assert_eq!(c.recv(Duration::from_secs(5)).unwrap(), sample());
        server.join().unwrap();
        assert_eq!(c.recv(Duration::from_secs(1)), Err(NetError::Closed));
    }

    #[test]
    fn port_in_use() {
        let listener = TcpTransport::bind("127.0.0.1:0".parse().unwrap()).unwrap();
        let addr = listener.local_addr().unwrap();
        assert_eq!(TcpTransport::bind(addr).unwrap_err(), NetError::PortInUse(addr.port()));
    }

    #[test]
    fn host_and_join_over_channels() {
        let cfg = SessionConfig::new(Flow::Thimbles, "net");
        let (mut a, mut b) = duplex(Duration::ZERO);
        let host_cfg = cfg.clone();
        let host = std::thread::spawn(move || run_host(&host_cfg, &mut a, PeerOptions::default()).unwrap());
        let join = run_join(&SessionConfig::new(Flow::Thimbles, "net"), &mut b, PeerOptions::default()).unwrap();
        let host = host.join().unwrap();
        assert!(host.party.is_finished() && join.party.is_finished());
        assert_eq!(host.party.verdict(), join.party.verdict());
    }
}
