//! HTTP and WebSocket front end for live sessions.
//!
//! - `POST /session` with a session config creates a session and returns its id.
//! - `GET /session/{id}/state?role=bob` returns that player's view.
//! - `GET /session/{id}/transcript` returns the transcript so far.
//! - `GET /session/{id}/ws?role=bob&since=N` streams events from index `N`
//!   and accepts `{"action":"choose","index":1}` and `{"action":"reveal"}`.
//!
//! Each session is a pair of party state machines behind one lock; every
//! action runs the message queue to quiescence before the lock is released.
//! A party left waiting longer than the session deadline takes its timeout
//! path, which advances the ledger to the refund height and reclaims.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use randlock_core::protocol::{
    make_party, Decision, Flow, Out, Party, PlayerView, ProtocolError, Role, SessionConfig,
};
use randlock_core::session_net::{Envelope, SessionId};
use randlock_core::transcript::{Event, Origin, Recorder, Transcript};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("port {0} is in use")]
    PortInUse(u16),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Body of `POST /session`: a session config plus daemon options.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct CreateSession {
    #[serde(flatten)]
    pub config: SessionConfig,
    /// Roles the daemon plays itself, using their configured or seeded choices.
    pub auto: Vec<Role>,
    /// How long a party waits for its peer before timing out.
    pub deadline_ms: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Created {
    pub session_id: SessionId,
    pub flow: Flow,
    pub n: usize,
}

/// Player action on the wire; indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Choose { index: usize },
    Reveal,
}

impl Action {
    pub fn decision(self) -> Result<Decision, String> {
        match self {
            Action::Choose { index: 0 } => Err("indices are 1-based".into()),
            Action::Choose { index } => Ok(Decision::Choose(index - 1)),
            Action::Reveal => Ok(Decision::Reveal),
        }
    }
}

/// Frames the daemon sends over the WebSocket.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Frame {
    Hello { session_id: SessionId, role: Role },
    Event { index: usize, event: Event },
    State { view: PlayerView },
    Ack { action: Action },
    Error { message: String },
}

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(60);

pub struct Session {
    id: SessionId,
    parties: [Box<dyn Party>; 2],
    recorder: Recorder,
    queue: VecDeque<(Role, Out)>,
    auto: Vec<Role>,
    deadline: Duration,
    last_progress: Instant,
    notify: watch::Sender<usize>,
}

fn idx(role: Role) -> usize {
    match role {
        Role::Challenger => 0,
        Role::Accepter => 1,
    }
}

impl Session {
    pub fn new(req: CreateSession) -> Result<Self, ProtocolError> {
        let cfg = req.config;
        let id = cfg.session_id();
        let parties = [
            make_party(&cfg, Role::Challenger, cfg.party_seed(Role::Challenger), id)?,
            make_party(&cfg, Role::Accepter, cfg.party_seed(Role::Accepter), id)?,
        ];
        let (notify, _) = watch::channel(0);
        let mut s = Session {
            id,
            parties,
            recorder: Recorder::new(id, cfg, Origin::Daemon),
            queue: VecDeque::new(),
            auto: req.auto,
            deadline: req.deadline_ms.map_or(DEFAULT_DEADLINE, Duration::from_millis),
            last_progress: Instant::now(),
            notify,
        };
        let outs = s.parties[0].start();
        s.enqueue(Role::Challenger, outs);
        s.pump();
        Ok(s)
    }

    fn enqueue(&mut self, role: Role, outs: Vec<Out>) {
        self.queue.extend(outs.into_iter().map(|o| (role, o)));
    }

    /// Delivers queued messages and automatic decisions until nothing moves.
    fn pump(&mut self) {
        loop {
            for role in Role::BOTH {
                if !self.auto.contains(&role) {
                    continue;
                }
                let p = &mut self.parties[idx(role)];
                if let Some(d) = p.auto_decision() {
                    if let Ok(outs) = p.decide(d) {
                        self.enqueue(role, outs);
                    }
                }
            }
            let Some((sender, out)) = self.queue.pop_front() else { break };
            let env = Envelope::seal(self.id, out.step, sender, &out.msg);
            self.recorder.record(&env);
            let receiver = sender.peer();
            let outs = self.parties[idx(receiver)].handle(&out.msg);
            self.enqueue(receiver, outs);
        }
        self.last_progress = Instant::now();
        self.notify.send_replace(self.recorder.events().len());
    }

    pub fn act(&mut self, role: Role, action: Action) -> Result<(), String> {
        let decision = action.decision()?;
        let outs = self.parties[idx(role)].decide(decision).map_err(|e| e.to_string())?;
        self.enqueue(role, outs);
        self.pump();
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.parties.iter().all(|p| p.is_finished())
    }

    /// Fires the timeout of a party left waiting past the deadline.
    pub fn check_deadline(&mut self, now: Instant) -> bool {
        if self.finished() || now.duration_since(self.last_progress) < self.deadline {
            return false;
        }
        // The party not holding up the game is the one whose deadline passed.
        let waiting = Role::BOTH
            .into_iter()
            .find(|r| {
                let p = &self.parties[idx(*r)];
                !p.is_finished() && p.pending().is_none() && !p.is_stalled()
            })
            .or_else(|| Role::BOTH.into_iter().find(|r| !self.parties[idx(*r)].is_finished()));
        let Some(role) = waiting else { return false };
        self.recorder.record_timeout(role, "peer silent past the deadline");
        let outs = self.parties[idx(role)].on_timeout();
        self.enqueue(role, outs);
        self.pump();
        true
    }

    pub fn view(&self, role: Role) -> PlayerView {
        self.parties[idx(role)].view()
    }

    pub fn events(&self) -> &[Event] {
        self.recorder.events()
    }

    pub fn transcript(&self) -> Transcript {
        let refs: [&dyn Party; 2] = [self.parties[0].as_ref(), self.parties[1].as_ref()];
        self.recorder.clone().finish(&refs)
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.notify.subscribe()
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<SessionId, Arc<Mutex<Session>>>>>,
    counter: Arc<AtomicU64>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, mut req: CreateSession) -> Result<Created, DaemonError> {
        if req.config.seed.is_empty() {
            let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
            req.config.seed = format!("daemon/{}/{nanos}", self.counter.fetch_add(1, Ordering::Relaxed));
        }
        if req.config.flow == Flow::Trace {
            return Err(DaemonError::BadConfig("the trace flow has no second player".into()));
        }
        let created = Created { session_id: req.config.session_id(), flow: req.config.flow, n: req.config.n };
        let session = Session::new(req).map_err(|e| DaemonError::BadConfig(e.to_string()))?;
        let mut map = self.sessions.lock().unwrap();
        if map.contains_key(&created.session_id) {
            return Err(DaemonError::BadConfig(format!("session {} already exists", created.session_id)));
        }
        map.insert(created.session_id, Arc::new(Mutex::new(session)));
        Ok(created)
    }

    pub fn get(&self, id: &SessionId) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    /// Fires every overdue deadline once.
    pub fn tick(&self) {
        let now = Instant::now();
        let sessions: Vec<_> = self.sessions.lock().unwrap().values().cloned().collect();
        for s in sessions {
            s.lock().unwrap().check_deadline(now);
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
struct RoleQuery {
    role: String,
    #[serde(default)]
    since: usize,
}

fn lookup(state: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, Response> {
    let id: SessionId = id.parse().map_err(|_| error(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    state.get(&id).ok_or_else(|| error(StatusCode::NOT_FOUND, format!("unknown session {id}")))
}

fn parse_role(s: &str) -> Result<Role, Response> {
    s.parse().map_err(|e: String| error(StatusCode::BAD_REQUEST, e))
}

async fn create(State(state): State<AppState>, body: axum::body::Bytes) -> Response {
    let req: CreateSession = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("bad session config: {e}")),
    };
    match state.create(req) {
        Ok(c) => (StatusCode::CREATED, Json(c)).into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn get_state(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<RoleQuery>) -> Response {
    let (session, role) = match (lookup(&state, &id), parse_role(&q.role)) {
        (Ok(s), Ok(r)) => (s, r),
        (Err(e), _) | (_, Err(e)) => return e,
    };
    let view = session.lock().unwrap().view(role);
    Json(view).into_response()
}

async fn get_transcript(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match lookup(&state, &id) {
        Ok(s) => {
            let t = s.lock().unwrap().transcript();
            Json(t).into_response()
        }
        Err(e) => e,
    }
}

async fn ws(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<RoleQuery>, upgrade: WebSocketUpgrade) -> Response {
    let (session, role) = match (lookup(&state, &id), parse_role(&q.role)) {
        (Ok(s), Ok(r)) => (s, r),
        (Err(e), _) | (_, Err(e)) => return e,
    };
    upgrade.on_upgrade(move |socket| play(socket, session, role, q.since))
}

async fn send(socket: &mut WebSocket, frame: &Frame) -> bool {
    let text = serde_json::to_string(frame).expect("frames serialize");
    socket.send(WsMessage::Text(text)).await.is_ok()
}

/// Frames for events past `sent` and the current view.
fn catch_up(session: &Mutex<Session>, role: Role, sent: &mut usize) -> Vec<Frame> {
    let s = session.lock().unwrap();
    let events = s.events();
    let mut frames: Vec<Frame> = events
        .iter()
        .enumerate()
        .skip(*sent)
        .map(|(index, event)| Frame::Event { index, event: event.clone() })
        .collect();
    *sent = (*sent).max(events.len());
    frames.push(Frame::State { view: s.view(role) });
    frames
}

async fn play(mut socket: WebSocket, session: Arc<Mutex<Session>>, role: Role, since: usize) {
    let (id, mut changes) = {
        let s = session.lock().unwrap();
        (s.id, s.subscribe())
    };
    let mut sent = since;
    if !send(&mut socket, &Frame::Hello { session_id: id, role }).await {
        return;
    }
    for f in catch_up(&session, role, &mut sent) {
        if !send(&mut socket, &f).await {
            return;
        }
    }
    loop {
        tokio::select! {
            changed = changes.changed() => {
                if changed.is_err() {
                    return;
                }
                for f in catch_up(&session, role, &mut sent) {
                    if !send(&mut socket, &f).await {
                        return;
                    }
                }
            }
            msg = socket.recv() => {
                let text = match msg {
                    Some(Ok(WsMessage::Text(t))) => t,
                    Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<Action>(&text) {
                    Err(e) => Frame::Error { message: format!("bad action: {e}") },
                    Ok(action) => match session.lock().unwrap().act(role, action) {
                        Ok(()) => Frame::Ack { action },
                        Err(message) => Frame::Error { message },
                    },
                };
                if !send(&mut socket, &reply).await {
                    return;
                }
            }
        }
    }
}

async fn allow_any_origin(response: Response) -> Response {
    let mut response = response;
    response.headers_mut().insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    response.headers_mut().insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
    response
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", post(create).options(|| async { StatusCode::NO_CONTENT }))
        .route("/session/:id/state", get(get_state))
        .route("/session/:id/transcript", get(get_transcript))
        .route("/session/:id/ws", get(ws))
        .layer(axum::middleware::map_response(allow_any_origin))
        .with_state(state)
}

/// Binds a loopback port; port 0 picks a free one.
pub async fn bind(port: u16) -> Result<TcpListener, DaemonError> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => DaemonError::PortInUse(port),
        _ => DaemonError::Io(e),
    })
}

/// Serves until the listener fails, firing deadlines every `tick`.
pub async fn serve(listener: TcpListener, state: AppState, tick: Duration) -> Result<(), DaemonError> {
    let ticker = state.clone();
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(tick);
        loop {
            interval.tick().await;
            ticker.tick();
        }
    });
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actions_are_one_based() {
        let a: Action = serde_json::from_str(r#"{"action":"choose","index":1}"#).unwrap();
        assert_eq!(a.decision(), Ok(Decision::Choose(0)));
        let a: Action = serde_json::from_str(r#"{"action":"reveal"}"#).unwrap();
        assert_eq!(a.decision(), Ok(Decision::Reveal));
        assert!(Action::Choose { index: 0 }.decision().is_err());
    }

    #[test]
    fn session_plays_to_settlement_without_network() {
        let mut cfg = SessionConfig::new(Flow::Thimbles, "unit");
        cfg.n = 2;
        let mut s = Session::new(CreateSession { config: cfg, auto: vec![], deadline_ms: None }).unwrap();
        assert_eq!(s.view(Role::Challenger).pending, Some(randlock_core::protocol::DecisionKind::Hide));
        assert!(s.act(Role::Accepter, Action::Choose { index: 1 }).is_err());
        s.act(Role::Challenger, Action::Choose { index: 2 }).unwrap();
        s.act(Role::Accepter, Action::Choose { index: 2 }).unwrap();
        s.act(Role::Challenger, Action::Reveal).unwrap();
        assert!(s.finished());
        assert_eq!(s.transcript().report.accepter_won, Some(true));
    }

    #[test]
    fn overdue_guess_times_out_into_reclaim() {
        let cfg = SessionConfig::new(Flow::Thimbles, "late");
        let mut s = Session::new(CreateSession { config: cfg.clone(), auto: vec![Role::Challenger], deadline_ms: Some(0) }).unwrap();
        assert!(s.check_deadline(Instant::now()));
        // The accepter takes its own timeout once the challenger's reclaim lands.
        while !s.finished() {
            assert!(s.check_deadline(Instant::now()));
        }
        let t = s.transcript();
        assert!(t.report.height >= cfg.t1);
        assert_eq!(t.report.balances.challenger, cfg.deposit());
        assert_eq!(t.report.balances.accepter, cfg.deposit());
    }
}
