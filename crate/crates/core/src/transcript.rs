//! Session transcripts: the ordered envelope stream of a run, interleaved
//! with the ledger events an observer derives from it, plus the outcome.
//!
//! Replay re-checks every digest, rebuilds the ledger events from the
//! envelopes alone, re-verifies every proof, and for in-process runs
//! re-executes the session and compares digests.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::Address;
use crate::ledger::{LedgerState, SpendCondition, Txid, TxOut};
use crate::protocol::{
    adjudicate, ideal_key, session_genesis, summarize, trace, AbortCode, Balances, Flow, Message, OutcomeReport, Party,
    Role, SessionConfig,
};
use crate::proofs::{KeyBinding, Proof, ProofSystem, Statement};
use crate::session_net::{Envelope, SessionId};
use crate::statetrace::{verify_trace, PublicTreeCommitments, TraceRun, TraceTx};

pub const TRANSCRIPT_KIND: &str = "session_transcript";
pub const TRANSCRIPT_VERSION: u32 = 1;

/// JSON schema of transcript files; envelopes refer to [`crate::session_net::ENVELOPE_SCHEMA`].
pub const TRANSCRIPT_SCHEMA: &str = include_str!("../schema/transcript.schema.json");

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Both parties in one process.
    Local,
    Host,
    Join,
    /// Both parties in the daemon, decisions taken by players. Not re-executable.
    Daemon,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Envelope { envelope: Envelope },
    Genesis { txid: Txid },
    Tx { txid: Txid, accepted: bool, error: Option<String>, height: u64 },
    Height { height: u64 },
    Timeout { role: Role, reason: String },
    /// `role` discarded an incoming envelope.
    Rejected { role: Role, reason: String },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Audit {
    /// Key of the ideal proof functionality, so a verifier can re-check
    /// attestations. Derivable from the session id.
    pub ideal_key: String,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Transcript {
    pub kind: String,
    pub v: u32,
    pub session_id: SessionId,
    pub flow: Flow,
    pub origin: Origin,
    pub config: SessionConfig,
    pub events: Vec<Event>,
    pub report: OutcomeReport,
    pub audit: Audit,
}

impl Transcript {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcripts serialize");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn envelopes(&self) -> impl Iterator<Item = &Envelope> {
        self.events.iter().filter_map(|e| match e {
            Event::Envelope { envelope } => Some(envelope),
            _ => None,
        })
    }

    pub fn digests(&self) -> Vec<String> {
        self.envelopes().map(|e| e.digest.to_hex()).collect()
    }
}

/// Builds a transcript as envelopes pass, tracking an observer ledger.
#[derive(Clone)]
pub struct Recorder {
    session: SessionId,
    cfg: SessionConfig,
    origin: Origin,
    events: Vec<Event>,
    wallets: [Option<Address>; 2],
    observer: Option<LedgerState>,
}

fn slot(role: Role) -> usize {
    match role {
        Role::Challenger => 0,
        Role::Accepter => 1,
    }
}

impl Recorder {
    pub fn new(session: SessionId, cfg: SessionConfig, origin: Origin) -> Self {
        Recorder { session, cfg, origin, events: Vec::new(), wallets: [None; 2], observer: None }
    }

    pub fn session_id(&self) -> SessionId {
        self.session
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn observer(&self) -> Option<&LedgerState> {
        self.observer.as_ref()
    }

    pub fn wallet(&self, role: Role) -> Option<Address> {
        self.wallets[slot(role)]
    }

    pub fn record(&mut self, env: &Envelope) {
        self.events.push(Event::Envelope { envelope: env.clone() });
        let Ok(msg) = env.message() else { return };
        match msg {
            Message::Hello { wallet, params } => {
                if let (Role::Challenger, Some(p)) = (env.sender, params) {
                    self.cfg.apply_params(&p);
                }
                self.wallets[slot(env.sender)] = Some(wallet);
                if self.observer.is_none() {
                    self.try_genesis();
                }
            }
            Message::Broadcast { txs } => {
                let Some(ledger) = self.observer.as_mut() else { return };
                for tx in txs {
                    let (accepted, error) = match ledger.apply(&tx) {
                        Ok(_) => (true, None),
                        Err(e) => (false, Some(e.to_string())),
                    };
                    self.events.push(Event::Tx { txid: tx.txid(), accepted, error, height: ledger.height() });
                }
            }
            Message::Advance { height } => {
                if let Some(ledger) = self.observer.as_mut() {
                    ledger.advance_to(height);
                    self.events.push(Event::Height { height: ledger.height() });
                }
            }
            _ => {}
        }
    }

    fn try_genesis(&mut self) {
        let built = match (self.cfg.flow, self.wallets) {
            (Flow::Trace, [Some(c), _]) => {
                Some(LedgerState::genesis(vec![TxOut { amount: self.cfg.deposit(), cond: SpendCondition::p2pkh(c) }]))
            }
            (Flow::Trace, _) => None,
            (_, [Some(c), Some(a)]) => Some(session_genesis(self.cfg.deposit(), c, a)),
            _ => None,
        };
        if let Some((ledger, txid)) = built {
            self.observer = Some(ledger);
            self.events.push(Event::Genesis { txid });
        }
    }

    pub fn record_timeout(&mut self, role: Role, reason: &str) {
        self.events.push(Event::Timeout { role, reason: reason.to_string() });
    }

    pub fn record_rejected(&mut self, role: Role, reason: &str) {
        self.events.push(Event::Rejected { role, reason: reason.to_string() });
    }

    pub fn balances(&self) -> Balances {
        match (&self.observer, self.wallets) {
            (Some(l), [Some(c), a]) => {
                let mut b = Balances::from_ledger(l, c, a.unwrap_or(c));
                if a.is_none() {
                    b.accepter = 0;
                }
                b
            }
            _ => Balances::default(),
        }
    }

    /// Summarizes the run from the parties this process drove.
    pub fn report(&self, parties: &[&dyn Party]) -> OutcomeReport {
        let height = self.observer.as_ref().map_or(0, |l| l.height());
        summarize(&self.cfg, self.session, parties, height, self.balances())
    }

    pub fn finish(self, parties: &[&dyn Party]) -> Transcript {
        let report = self.report(parties);
        self.finish_with(report)
    }

    pub fn finish_with(self, report: OutcomeReport) -> Transcript {
        Transcript {
            kind: TRANSCRIPT_KIND.into(),
            v: TRANSCRIPT_VERSION,
            session_id: self.session,
            flow: self.cfg.flow,
            origin: self.origin,
            audit: Audit { ideal_key: hex::encode(ideal_key(&self.session)) },
            config: self.cfg,
            events: self.events,
            report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event {index}: {reason}")]
pub struct ReplayError {
    /// Index into `events` of the first failing event.
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReplaySummary {
    pub envelopes: usize,
    pub proofs_checked: usize,
    pub txs_accepted: usize,
    pub reexecuted: bool,
    pub trace_verified: Option<bool>,
}

fn fail<T>(index: usize, reason: impl Into<String>) -> Result<T, ReplayError> {
    Err(ReplayError { index, reason: reason.into() })
}

/// Statement context accumulated from earlier messages.
#[derive(Default)]
struct ProofContext {
    h_list: Vec<crate::group::GroupPoint>,
    oprand_commit: Option<(crate::group::GroupPoint, crate::group::Scalar)>,
    r_a_hash: Option<crate::group::Scalar>,
}

impl ProofContext {
    /// The statement each proof-carrying message claims.
    fn statements(&mut self, msg: &Message) -> Vec<(Statement, Proof)> {
        match msg {
            Message::CovenantCommit { addr_a, c, pi_c, .. } => vec![(Statement::Rc { addr_a: *addr_a, c: *c }, pi_c.clone())],
            Message::OpRandCommit { p_c, r_c_hash } => {
                self.oprand_commit = Some((*p_c, *r_c_hash));
                Vec::new()
            }
            Message::OpRandOffer { h_list, pi_a } => {
                self.h_list = h_list.clone();
                let (p_a, h) = self.oprand_commit.unwrap_or((crate::group::GroupPoint::IDENTITY, crate::group::Scalar::ZERO));
                vec![(Statement::Ra { h_list: h_list.clone(), p_a, binding: KeyBinding::Hash(h) }, pi_a.clone())]
            }
            Message::OpRandAccept { r_a_hash } => {
                self.r_a_hash = Some(*r_a_hash);
                Vec::new()
            }
            Message::OpRandProof { pi_r } => {
                let h = self.r_a_hash.unwrap_or(crate::group::Scalar::ZERO);
                vec![(Statement::Rr { binding: KeyBinding::Hash(h), h_list: self.h_list.clone() }, pi_r.clone())]
            }
            Message::ThimblesOffer { p_a, h_list, addr_a, pi_a, .. } => {
                self.h_list = h_list.clone();
                vec![(Statement::Ra { h_list: h_list.clone(), p_a: *p_a, binding: KeyBinding::Address(*addr_a) }, pi_a.clone())]
            }
            Message::ThimblesChoice { addr_b, pi_r, .. } => {
                vec![(Statement::Rr { binding: KeyBinding::Address(*addr_b), h_list: self.h_list.clone() }, pi_r.clone())]
            }
            Message::TraceCommit { commitments, pi_t } => vec![(trace::statement(commitments), pi_t.clone())],
            _ => Vec::new(),
        }
    }
}

/// Re-verifies a transcript. `Err` carries the index of the first failing event.
pub fn replay(t: &Transcript) -> Result<ReplaySummary, ReplayError> {
    let end = t.events.len();
    if t.kind != TRANSCRIPT_KIND || t.v != TRANSCRIPT_VERSION {
        return fail(0, format!("unsupported transcript kind {} v{}", t.kind, t.v));
    }
    if t.config.session_id() != t.session_id && t.origin != Origin::Join {
        return fail(0, "session id does not match the config");
    }
    let mut summary = ReplaySummary::default();

    // Envelopes: digest, session, per-sender step order.
    let mut last_step: HashMap<Role, u32> = HashMap::new();
    let mut messages: Vec<(usize, Role, Message)> = Vec::new();
    for (i, ev) in t.events.iter().enumerate() {
        let Event::Envelope { envelope: env } = ev else { continue };
        if env.session_id != t.session_id {
            return fail(i, format!("envelope belongs to session {}", env.session_id));
        }
        if env.check().is_err() {
            return fail(i, "envelope digest mismatch");
        }
        if let Some(prev) = last_step.insert(env.sender, env.step) {
            if env.step <= prev {
                return fail(i, format!("step {} from {} does not follow step {prev}", env.step, env.sender));
            }
        }
        let msg = env.message().map_err(|e| ReplayError { index: i, reason: e.to_string() })?;
        messages.push((i, env.sender, msg));
        summary.envelopes += 1;
    }

    // Ledger events, rebuilt from the envelopes alone.
    let mut rec = Recorder::new(t.session_id, t.config.clone(), t.origin);
    for ev in &t.events {
        match ev {
            Event::Envelope { envelope } => rec.record(envelope),
            Event::Timeout { role, reason } => rec.record_timeout(*role, reason),
            Event::Rejected { role, reason } => rec.record_rejected(*role, reason),
            _ => {}
        }
    }
    let rebuilt = rec.events();
    for (i, (a, b)) in t.events.iter().zip(rebuilt).enumerate() {
        if a != b {
            return fail(i, "ledger event does not follow from the envelopes");
        }
    }
    if rebuilt.len() != t.events.len() {
        return fail(rebuilt.len().min(end), "event count differs from the rebuilt transcript");
    }
    summary.txs_accepted = rebuilt.iter().filter(|e| matches!(e, Event::Tx { accepted: true, .. })).count();

    // Proofs. A rejected proof must be answered by the receiver's
    // ProofRejected abort, and such an abort needs a rejected proof.
    let proofs = ProofSystem::new(ideal_key(&t.session_id));
    let mut ctx = ProofContext::default();
    let mut rejected: Option<(usize, Role)> = None;
    for (i, sender, msg) in &messages {
        if let Message::Abort { code: AbortCode::ProofRejected, .. } = msg {
            match rejected.take() {
                Some((_, receiver)) if receiver == *sender => continue,
                _ => return fail(*i, "ProofRejected abort without a rejected proof"),
            }
        }
        if let Some((j, receiver)) = rejected {
            if receiver == *sender {
                return fail(j, "a rejected proof was accepted by its receiver");
            }
        }
        for (stmt, proof) in ctx.statements(msg) {
            summary.proofs_checked += 1;
            if !proofs.verify(&stmt, &proof).unwrap_or(false) {
                // Only the first rejection matters; the receiver aborts on it.
                if rejected.is_none() {
                    rejected = Some((*i, sender.peer()));
                }
            }
        }
    }
    if let Some((j, receiver)) = rejected {
        let single_party = t.flow == Flow::Trace || (t.origin != Origin::Local && !last_step.contains_key(&receiver));
        if !single_party {
            return fail(j, "rejected proof without an abort from its receiver");
        }
        if t.flow == Flow::Trace {
            return fail(j, "trace commitment proof does not verify");
        }
    }

    // The report must agree with the ledger the envelopes imply.
    if rec.balances() != t.report.balances {
        return fail(end, "report balances differ from the replayed ledger");
    }
    if rec.observer().map_or(0, |l| l.height()) != t.report.height {
        return fail(end, "report height differs from the replayed ledger");
    }
    if t.report.winner != adjudicate(&t.report).ok() {
        return fail(end, "report winner does not follow from the outcome");
    }

    // Trace transcripts: the spends must open the committed tree.
    if t.flow == Flow::Trace {
        let ok = replay_trace(&messages);
        summary.trace_verified = Some(ok);
        if !ok {
            return fail(end, "verify_trace rejects the revealed spends");
        }
    }

    // In-process runs are fully determined by the config: run them again.
    if t.origin == Origin::Local {
        let again = rerun(&t.config).map_err(|e| ReplayError { index: end, reason: format!("re-execution failed: {e}") })?;
        let ours = t.digests();
        let theirs = again.digests();
        if let Some(i) = (0..ours.len().max(theirs.len())).find(|&i| ours.get(i) != theirs.get(i)) {
            let index = t
                .events
                .iter()
                .enumerate()
                .filter(|(_, e)| matches!(e, Event::Envelope { .. }))
                .nth(i)
                .map_or(end, |(j, _)| j);
            return fail(index, "re-execution produces a different envelope");
        }
        if again.report != t.report {
            return fail(end, "re-execution produces a different outcome");
        }
        summary.reexecuted = true;
    }
    Ok(summary)
}

fn rerun(cfg: &SessionConfig) -> Result<Transcript, crate::protocol::ProtocolError> {
    if cfg.flow == Flow::Trace {
        return Ok(trace::run(cfg)?.transcript);
    }
    let run = crate::protocol::run_with_decisions(cfg, crate::protocol::RunOptions { record: true }, |_, _| None)?;
    Ok(run.transcript.expect("recording was requested"))
}

fn replay_trace(messages: &[(usize, Role, Message)]) -> bool {
    let mut commitments: Option<&PublicTreeCommitments> = None;
    let mut txs = Vec::new();
    for (_, _, msg) in messages {
        match msg {
            Message::TraceCommit { commitments: c, .. } => commitments = Some(c),
            Message::Broadcast { txs: t } => txs.extend(t.iter().cloned()),
            _ => {}
        }
    }
    let Some(c) = commitments else { return false };
    let mut txs = txs.into_iter();
    let Some(tx) = txs.next() else { return false };
    let run = TraceRun {
        trace_tx: TraceTx { tx, depth: c.depth, defer_state: c.state_lock.is_none() },
        spends: txs.collect(),
    };
    verify_trace(&run, c)
}
