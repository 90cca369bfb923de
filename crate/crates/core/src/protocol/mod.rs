//! Party state machines for the covenant, OP_RAND and thimbles flows, plus
//! the single-party state-trace demo.
//!
//! A [`Party`] consumes one [`Message`] at a time and returns the messages it
//! sends in response. Parties never share memory: each keeps its own ledger
//! replica, and transactions travel as `ledger/broadcast` messages so that a
//! transcript of envelopes is a complete record of the session.

mod cheats;
pub mod covenant;
pub mod oprand;
mod party;
mod report;
mod runner;
pub mod thimbles;
pub mod trace;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commitments::CommitmentError;
use crate::group::{sha256_parts, Address, GroupPoint, Scalar};
use crate::ledger::{LedgerError, LedgerState, Transaction, SATS_PER_BTC};
use crate::proofs::{BackendTag, Proof};
use crate::session_net::{NetError, SessionId};
use crate::statetrace::{default_fns, PublicTreeCommitments, TracePath, TraceError, TransitionFn};

pub use cheats::forge_proof;
pub use party::{ideal_key, make_party, session_genesis, wallet_key, Claim, PlayerView, UtxoView};
pub use report::{adjudicate, summarize, Balances, OutcomeReport, SessionStatus, Winner};
pub use runner::{run_local, run_with_decisions, LocalRun, RunOptions};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Challenger,
    Accepter,
}

impl Role {
    pub const BOTH: [Role; 2] = [Role::Challenger, Role::Accepter];

    pub fn peer(self) -> Role {
        match self {
            Role::Challenger => Role::Accepter,
            Role::Accepter => Role::Challenger,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Challenger => "challenger",
            Role::Accepter => "accepter",
        }
    }

    /// Game-flow name.
    pub fn alias(self) -> &'static str {
        match self {
            Role::Challenger => "Alice",
            Role::Accepter => "Bob",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "challenger" | "alice" | "c" => Ok(Role::Challenger),
            "accepter" | "bob" | "a" => Ok(Role::Accepter),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    Covenant,
    #[serde(rename = "oprand")]
    OpRand,
    #[default]
    Thimbles,
    Trace,
}

impl Flow {
    pub fn name(self) -> &'static str {
        match self {
            Flow::Covenant => "covenant",
            Flow::OpRand => "oprand",
            Flow::Thimbles => "thimbles",
            Flow::Trace => "trace",
        }
    }

    /// Whether the flow locks deposits on the ledger.
    pub fn has_funds(self) -> bool {
        matches!(self, Flow::Covenant | Flow::Thimbles)
    }
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flow {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "covenant" => Ok(Flow::Covenant),
            "oprand" | "op_rand" | "op-rand" => Ok(Flow::OpRand),
            "thimbles" => Ok(Flow::Thimbles),
            "trace" => Ok(Flow::Trace),
            _ => Err(format!("unknown flow {s:?}")),
        }
    }
}

/// Scripted misbehaviour, used to exercise the abort paths.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cheat {
    /// The challenger's address uses a point outside its commitment set.
    ChallengerBadAddr,
    /// The challenger opens something other than what it committed to.
    ChallengerBadReveal,
    /// The accepter's address is not `P + H_y` for any offered `H_y`.
    AccepterBadAddr,
    /// The accepter claims a key it does not know.
    AccepterNoKey,
    /// The challenger refuses to co-sign.
    ChallengerRefuse,
    /// The accepter stops responding after the offer.
    AccepterStall,
}

impl Cheat {
    pub const ALL: [Cheat; 6] = [
        Cheat::ChallengerBadAddr,
        Cheat::ChallengerBadReveal,
        Cheat::AccepterBadAddr,
        Cheat::AccepterNoKey,
        Cheat::ChallengerRefuse,
        Cheat::AccepterStall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Cheat::ChallengerBadAddr => "challenger-bad-addr",
            Cheat::ChallengerBadReveal => "challenger-bad-reveal",
            Cheat::AccepterBadAddr => "accepter-bad-addr",
            Cheat::AccepterNoKey => "accepter-no-key",
            Cheat::ChallengerRefuse => "challenger-refuse",
            Cheat::AccepterStall => "accepter-stall",
        }
    }

    pub fn cheater(self) -> Role {
        match self {
            Cheat::ChallengerBadAddr | Cheat::ChallengerBadReveal | Cheat::ChallengerRefuse => Role::Challenger,
            Cheat::AccepterBadAddr | Cheat::AccepterNoKey | Cheat::AccepterStall => Role::Accepter,
        }
    }
}

impl fmt::Display for Cheat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cheat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Cheat::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown cheat {s:?}; expected one of {}", Cheat::ALL.map(|c| c.name()).join(", ")))
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceParams {
    pub depth: u32,
    pub fns: Vec<TransitionFn>,
    /// Path to execute; derived from the seed when absent.
    pub path: Option<TracePath>,
    pub defer_state: bool,
    /// Hidden state; derived from the seed when absent.
    pub state: Option<Scalar>,
}

impl Default for TraceParams {
    fn default() -> Self {
        TraceParams { depth: 3, fns: default_fns(), path: None, defer_state: false, state: None }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub flow: Flow,
    /// Number of thimbles / commitments.
    pub n: usize,
    /// Satoshis per deposit; a per-flow default when absent.
    pub amount: Option<u64>,
    pub t1: u64,
    /// Defaults to `t1 + 10`.
    pub t2: Option<u64>,
    pub seed: String,
    pub backend: BackendTag,
    /// Include both parties' secret choices in the outcome report.
    pub introspect: bool,
    /// Covenant outputs carry timelocked refund branches.
    pub timelocked: bool,
    /// Challenger's hidden index, 1-based.
    pub x: Option<usize>,
    /// Accepter's guess, 1-based.
    pub y: Option<usize>,
    pub cheat: Option<Cheat>,
    pub trace: TraceParams,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            flow: Flow::Thimbles,
            n: 2,
            amount: None,
            t1: 10,
            t2: None,
            seed: String::new(),
            backend: BackendTag::Ideal,
            introspect: false,
            timelocked: false,
            x: None,
            y: None,
            cheat: None,
            trace: TraceParams::default(),
        }
    }
}

impl SessionConfig {
    pub fn new(flow: Flow, seed: impl Into<String>) -> Self {
        SessionConfig { flow, seed: seed.into(), ..Default::default() }
    }

    pub fn deposit(&self) -> u64 {
        self.amount.unwrap_or(match self.flow {
            Flow::Covenant | Flow::OpRand => SATS_PER_BTC,
            Flow::Thimbles => 5 * SATS_PER_BTC,
            Flow::Trace => SATS_PER_BTC * (self.trace.depth as u64 + 1),
        })
    }

    pub fn t2(&self) -> u64 {
        self.t2.unwrap_or(self.t1 + 10)
    }

    /// Height after which every refund branch of the flow is open.
    pub fn refund_height(&self) -> u64 {
        match self.flow {
            Flow::Covenant => self.t1.max(self.t2()),
            _ => self.t1,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::BadConfig(m));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.n > 64 {
            return bad(format!("n must be at most 64, got {}", self.n));
        }
        if self.deposit() == 0 {
            return bad("amounts must be positive".into());
        }
        if self.t1 == 0 || self.t2() == 0 {
            return bad("timelocks must be above the current height 0".into());
        }
        if self.backend != BackendTag::Ideal {
            return bad(format!("the {} backend only proves discrete-log statements", self.backend));
        }
        for (name, v) in [("x", self.x), ("y", self.y)] {
            if let Some(v) = v {
                if v == 0 || v > self.n {
                    return bad(format!("{name} must be within 1..={}, got {v}", self.n));
                }
            }
        }
        Ok(())
    }

    pub fn session_id(&self) -> SessionId {
        let d = sha256_parts(&[b"randlock/session/v1", self.flow.name().as_bytes(), &[0], self.seed.as_bytes()]);
        SessionId(d[..16].try_into().unwrap())
    }

    pub fn party_seed(&self, role: Role) -> [u8; 32] {
        party_seed(&self.seed, role)
    }

    pub fn public_params(&self) -> PublicParams {
        PublicParams {
            flow: self.flow,
            n: self.n,
            amount: self.deposit(),
            t1: self.t1,
            t2: self.t2(),
            timelocked: self.timelocked,
        }
    }

    /// Adopts the host's public parameters.
    pub fn apply_params(&mut self, p: &PublicParams) {
        self.flow = p.flow;
        self.n = p.n;
        self.amount = Some(p.amount);
        self.t1 = p.t1;
        self.t2 = Some(p.t2);
        self.timelocked = p.timelocked;
    }
}

/// Each party's seed is derived from the session seed and its role, so that
/// two processes given the same `--seed` reproduce an in-process run.
pub fn party_seed(seed: &str, role: Role) -> [u8; 32] {
    sha256_parts(&[b"randlock/party/v1", seed.as_bytes(), &[0], role.name().as_bytes()])
}

/// Session parameters the host announces in its hello.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PublicParams {
    pub flow: Flow,
    pub n: usize,
    pub amount: u64,
    pub t1: u64,
    pub t2: u64,
    pub timelocked: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "action", content = "index", rename_all = "snake_case")]
pub enum Decision {
    /// 0-based thimble index.
    Choose(usize),
    Reveal,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    /// Challenger picks the hidden index.
    Hide,
    /// Accepter picks a guess.
    Guess,
    /// Challenger co-signs and opens.
    Reveal,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortCode {
    ProofRejected,
    CommitmentMismatch,
    FundingMissing,
    RefusalToSign,
    PeerTimeout,
    LedgerRejected,
    BadMessage,
}

impl AbortCode {
    pub fn name(self) -> &'static str {
        match self {
            AbortCode::ProofRejected => "ProofRejected",
            AbortCode::CommitmentMismatch => "CommitmentMismatch",
            AbortCode::FundingMissing => "FundingMissing",
            AbortCode::RefusalToSign => "RefusalToSign",
            AbortCode::PeerTimeout => "PeerTimeout",
            AbortCode::LedgerRejected => "LedgerRejected",
            AbortCode::BadMessage => "BadMessage",
        }
    }
}

impl fmt::Display for AbortCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AbortInfo {
    pub by: Role,
    pub step: u32,
    pub code: AbortCode,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("proof {relation} rejected at step {step}")]
    ProofRejected { step: u32, relation: &'static str },
    #[error("commitment mismatch: {0}")]
    CommitmentMismatch(String),
    #[error("funding output missing")]
    FundingMissing,
    #[error("the revealing spend is not in the ledger yet")]
    NotYetRevealed,
    #[error("counterparty refused to sign")]
    RefusalToSign,
    #[error("peer timed out")]
    PeerTimeout,
    #[error("session incomplete")]
    Incomplete,
    #[error("decision {0:?} is not allowed in the current phase")]
    OutOfPhase(Decision),
    #[error("session aborted: {0}")]
    Aborted(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Commitment(#[from] CommitmentError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Protocol messages. The serde tag is the envelope `type`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum Message {
    #[serde(rename = "session/hello")]
    Hello { wallet: Address, params: Option<PublicParams> },
    #[serde(rename = "session/abort")]
    Abort { code: AbortCode, reason: String },
    #[serde(rename = "ledger/broadcast")]
    Broadcast { txs: Vec<Transaction> },
    #[serde(rename = "ledger/advance")]
    Advance { height: u64 },

    #[serde(rename = "covenant/commit")]
    CovenantCommit { addr_a: Address, c: GroupPoint, refund: Address, pi_c: Proof },
    #[serde(rename = "covenant/tx1")]
    CovenantTx1 { tx1: Transaction },

    #[serde(rename = "oprand/commit")]
    OpRandCommit { p_c: GroupPoint, r_c_hash: Scalar },
    #[serde(rename = "oprand/offer")]
    OpRandOffer { h_list: Vec<GroupPoint>, pi_a: Proof },
    #[serde(rename = "oprand/accept")]
    OpRandAccept { r_a_hash: Scalar },
    #[serde(rename = "oprand/proof")]
    OpRandProof { pi_r: Proof },
    #[serde(rename = "oprand/reveal")]
    OpRandReveal { r_c: GroupPoint },
    /// Opens `R_𝒜` after a win so the challenger can check it; `None` concedes.
    #[serde(rename = "oprand/claim")]
    OpRandClaim { opening: Option<ClaimOpening> },

    #[serde(rename = "thimbles/offer")]
    ThimblesOffer { p_a: GroupPoint, h_list: Vec<GroupPoint>, addr_a: Address, pi_a: Proof, tx1: Transaction },
    #[serde(rename = "thimbles/choice")]
    ThimblesChoice { addr_b: Address, pi_r: Proof, tx2: Transaction },
    #[serde(rename = "thimbles/pass")]
    ThimblesPass {},

    #[serde(rename = "trace/commit")]
    TraceCommit { commitments: PublicTreeCommitments, pi_t: Proof },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ClaimOpening {
    pub r_a: GroupPoint,
    pub p_a: GroupPoint,
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "session/hello",
            Message::Abort { .. } => "session/abort",
            Message::Broadcast { .. } => "ledger/broadcast",
            Message::Advance { .. } => "ledger/advance",
            Message::CovenantCommit { .. } => "covenant/commit",
            Message::CovenantTx1 { .. } => "covenant/tx1",
            Message::OpRandCommit { .. } => "oprand/commit",
            Message::OpRandOffer { .. } => "oprand/offer",
            Message::OpRandAccept { .. } => "oprand/accept",
            Message::OpRandProof { .. } => "oprand/proof",
            Message::OpRandReveal { .. } => "oprand/reveal",
            Message::OpRandClaim { .. } => "oprand/claim",
            Message::ThimblesOffer { .. } => "thimbles/offer",
            Message::ThimblesChoice { .. } => "thimbles/choice",
            Message::ThimblesPass { .. } => "thimbles/pass",
            Message::TraceCommit { .. } => "trace/commit",
        }
    }
}

/// A message a party sends at a protocol step.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Out {
    pub step: u32,
    pub msg: Message,
}

/// One side of a two-party session.
pub trait Party: Send {
    fn role(&self) -> Role;
    fn phase(&self) -> &'static str;
    /// Messages to send before anything is received.
    fn start(&mut self) -> Vec<Out>;
    fn handle(&mut self, msg: &Message) -> Vec<Out>;
    /// A decision this party is waiting for, if any.
    fn pending(&self) -> Option<DecisionKind>;
    /// The decision the party's seed (or the config) prescribes.
    fn auto_decision(&self) -> Option<Decision>;
    fn decide(&mut self, decision: Decision) -> Result<Vec<Out>, ProtocolError>;
    /// The peer has been silent past the deadline.
    fn on_timeout(&mut self) -> Vec<Out>;
    /// The transport delivered something unusable; abort with `code`.
    fn fail(&mut self, code: AbortCode, reason: &str) -> Vec<Out>;
    fn is_finished(&self) -> bool;
    /// True while a scripted stall keeps the party silent.
    fn is_stalled(&self) -> bool;
    fn abort_info(&self) -> Option<&AbortInfo>;
    /// Accepter's win as this party knows it.
    fn verdict(&self) -> Option<bool>;
    /// This party's own hidden index, 0-based.
    fn choice(&self) -> Option<usize>;
    fn ledger(&self) -> &LedgerState;
    fn wallet(&self) -> Address;
    fn notes(&self) -> &[String];
    fn view(&self) -> PlayerView;
    /// Every secret scalar the party holds, for leak audits.
    fn secret_material(&self) -> Vec<Scalar>;
}
