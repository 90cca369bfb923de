use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    covenant, oprand, thimbles, AbortCode, AbortInfo, Decision, DecisionKind, Flow, Message, Out, Party, ProtocolError,
    Role, SessionConfig,
};
use crate::group::{keygen, sha256_parts, sig_gen, Address, GroupPoint, KeyPair, Scalar, Signature};
use crate::ledger::{LedgerState, OutPoint, SpendCondition, Transaction, TxOut, Txid, Witness};
use crate::proofs::ProofSystem;
use crate::session_net::SessionId;

/// Key of the ideal proof functionality for a session.
pub fn ideal_key(session: &SessionId) -> [u8; 32] {
    sha256_parts(&[b"randlock/ideal-key/v1", &session.0])
}

/// The wallet holding a party's deposit.
pub fn wallet_key(party_seed: &[u8; 32]) -> KeyPair {
    keygen(&[&party_seed[..], b"wallet"].concat())
}

/// Funding outputs: the challenger's deposit at vout 0, the accepter's at 1.
pub fn session_genesis(deposit: u64, challenger: Address, accepter: Address) -> (LedgerState, Txid) {
    LedgerState::genesis(vec![
        TxOut { amount: deposit, cond: SpendCondition::p2pkh(challenger) },
        TxOut { amount: deposit, cond: SpendCondition::p2pkh(accepter) },
    ])
}

/// Why a party gave up.
#[derive(Debug)]
pub(crate) struct Fault {
    pub code: AbortCode,
    pub reason: String,
}

impl Fault {
    pub fn new(code: AbortCode, reason: impl Into<String>) -> Self {
        Fault { code, reason: reason.into() }
    }

    pub fn proof(relation: &str, step: u32) -> Self {
        Fault::new(AbortCode::ProofRejected, format!("proof {relation} rejected at step {step}"))
    }

    pub fn unexpected(phase: &str, msg: &Message) -> Self {
        Fault::new(AbortCode::BadMessage, format!("unexpected {} in phase {phase}", msg.type_name()))
    }
}

/// An output a party can sweep back to its wallet.
#[derive(Clone)]
pub struct Claim {
    pub outpoint: OutPoint,
    pub amount: u64,
    pub key: Scalar,
    /// AnyOf branch index, if the output has branches.
    pub branch: Option<u32>,
}

impl fmt::Debug for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Claim").field("outpoint", &self.outpoint).field("amount", &self.amount).finish_non_exhaustive()
    }
}

pub(crate) fn sign_tx(key: &Scalar, tx: &Transaction) -> Signature {
    sig_gen(key, &tx.sighash().0).expect("spend keys are nonzero")
}

/// Fills in a key-signature witness for `input`, wrapped in a branch selector.
pub(crate) fn sign_input(tx: &mut Transaction, input: usize, key: &Scalar, branch: Option<u32>) {
    let w = Witness::key_sig(key.base_mul(), sign_tx(key, tx));
    tx.inputs[input].witness = match branch {
        Some(b) => Witness::branch(b, w),
        None => w,
    };
}

/// Player-visible session state. Never contains the peer's secrets.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PlayerView {
    pub role: Role,
    pub flow: Flow,
    pub phase: String,
    pub pending: Option<DecisionKind>,
    pub n: usize,
    pub height: u64,
    pub t1: u64,
    pub h_list: Vec<GroupPoint>,
    pub addresses: BTreeMap<String, Address>,
    /// The viewer's own selection, 1-based.
    pub my_choice: Option<usize>,
    pub accepter_won: Option<bool>,
    pub abort: Option<AbortInfo>,
    pub finished: bool,
    pub utxos: Vec<UtxoView>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct UtxoView {
    pub outpoint: String,
    pub amount: u64,
    pub cond: String,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Stage {
    Running,
    /// This party aborted and waits for the peer's reclaim.
    Aborting,
    /// The peer aborted; its reclaim comes next.
    PeerAborted,
}

pub(crate) struct Core {
    pub role: Role,
    pub cfg: SessionConfig,
    pub seed: [u8; 32],
    pub wallet: KeyPair,
    pub proofs: ProofSystem,
    pub ledger: LedgerState,
    pub peer_wallet: Option<Address>,
    pub genesis: Option<Txid>,
    pub phase: &'static str,
    pub abort: Option<AbortInfo>,
    pub finished: bool,
    pub verdict: Option<bool>,
    pub notes: Vec<String>,
    last_step: Option<u32>,
    stage: Stage,
}

impl Core {
    fn new(cfg: SessionConfig, role: Role, seed: [u8; 32], session: SessionId) -> Self {
        let wallet = wallet_key(&seed);
        Core {
            role,
            cfg,
            seed,
            wallet,
            proofs: ProofSystem::new(ideal_key(&session)),
            ledger: LedgerState::new(),
            peer_wallet: None,
            genesis: None,
            phase: "hello",
            abort: None,
            finished: false,
            verdict: None,
            notes: Vec::new(),
            last_step: None,
            stage: Stage::Running,
        }
    }

    /// Deterministic index in `0..n` for this party.
    pub fn seeded_index(&self, label: &str) -> usize {
        let d = sha256_parts(&[&self.seed, label.as_bytes()]);
        (u64::from_be_bytes(d[..8].try_into().unwrap()) % self.cfg.n as u64) as usize
    }

    pub fn out(&mut self, step: u32, msg: Message) -> Out {
        let step = match self.last_step {
            Some(last) if step <= last => last + 1,
            _ => step,
        };
        self.last_step = Some(step);
        Out { step, msg }
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    pub fn funding(&self, role: Role) -> OutPoint {
        let genesis = self.genesis.expect("genesis is set after hello");
        OutPoint::new(genesis, if role == Role::Challenger { 0 } else { 1 })
    }

    pub fn own_funding(&self) -> OutPoint {
        self.funding(self.role)
    }

    /// Applies `txs` locally and announces them.
    pub fn broadcast(&mut self, step: u32, txs: Vec<Transaction>) -> Out {
        for tx in &txs {
            if let Err(e) = self.ledger.apply(tx) {
                self.notes.push(format!("own transaction {} rejected: {e}", tx.txid()));
            }
        }
        self.out(step, Message::Broadcast { txs })
    }

    fn apply_peer(&mut self, txs: &[Transaction]) -> Result<(), Fault> {
        for tx in txs {
            self.ledger
                .apply(tx)
                .map_err(|e| Fault::new(AbortCode::LedgerRejected, format!("transaction {} rejected: {e}", tx.txid())))?;
        }
        Ok(())
    }

    /// Advances to `height` if needed and sweeps `claims` to the wallet.
    pub fn sweep(&mut self, claims: Vec<Claim>, height: u64) -> Vec<Out> {
        let mut outs = Vec::new();
        if self.ledger.height() < height {
            self.ledger.advance_to(height);
            outs.push(self.out(0, Message::Advance { height }));
        }
        let claims: Vec<Claim> = claims.into_iter().filter(|c| self.ledger.is_unspent(&c.outpoint)).collect();
        let mut txs = Vec::new();
        if !claims.is_empty() {
            let total = claims.iter().map(|c| c.amount).sum();
            let mut tx = Transaction::new(
                claims.iter().map(|c| c.outpoint).collect(),
                vec![TxOut { amount: total, cond: SpendCondition::p2pkh(self.wallet.address()) }],
            );
            for (i, c) in claims.iter().enumerate() {
                sign_input(&mut tx, i, &c.key, c.branch);
            }
            self.notes.push(format!("{} reclaims {} sat at height {}", self.role.alias(), total, self.ledger.height()));
            txs.push(tx);
        }
        outs.push(self.broadcast(0, txs));
        outs
    }

    fn set_genesis(&mut self, peer_wallet: Address) {
        self.peer_wallet = Some(peer_wallet);
        let (c, a) = match self.role {
            Role::Challenger => (self.wallet.address(), peer_wallet),
            Role::Accepter => (peer_wallet, self.wallet.address()),
        };
        let (ledger, id) = session_genesis(self.cfg.deposit(), c, a);
        self.ledger = ledger;
        self.genesis = Some(id);
    }

    pub fn cheat(&self, cheat: super::Cheat) -> bool {
        self.cfg.cheat == Some(cheat)
    }
}

pub(crate) trait FlowLogic: Send {
    /// Both wallets are known and the genesis exists.
    fn on_ready(&mut self, core: &mut Core) -> Result<Vec<Out>, Fault>;
    fn on_message(&mut self, core: &mut Core, msg: &Message) -> Result<Vec<Out>, Fault>;
    /// Inspects peer transactions before they touch the ledger replica.
    fn precheck(&self, _core: &Core, _txs: &[Transaction]) -> Result<(), Fault> {
        Ok(())
    }
    fn pending(&self, _core: &Core) -> Option<DecisionKind> {
        None
    }
    fn auto_decision(&self, _core: &Core) -> Option<Decision> {
        None
    }
    fn decide(&mut self, core: &mut Core, _d: Decision) -> Result<Vec<Out>, Fault> {
        Err(Fault::new(AbortCode::BadMessage, format!("no decisions in phase {}", core.phase)))
    }
    /// Outputs this party could sweep once every timelock has passed.
    fn reclaimable(&self, core: &Core) -> Vec<Claim>;
    fn choice(&self) -> Option<usize> {
        None
    }
    fn stalled(&self, _core: &Core) -> bool {
        false
    }
    fn secrets(&self) -> Vec<Scalar>;
    fn fill_view(&self, _core: &Core, _view: &mut PlayerView) {}
}

pub(crate) struct Machine<F> {
    core: Core,
    logic: F,
}

impl<F: FlowLogic> Machine<F> {
    fn run(&mut self, f: impl FnOnce(&mut F, &mut Core) -> Result<Vec<Out>, Fault>) -> Vec<Out> {
        match f(&mut self.logic, &mut self.core) {
            Ok(outs) => outs,
            Err(fault) => self.abort(fault),
        }
    }

    fn abort(&mut self, fault: Fault) -> Vec<Out> {
        let core = &mut self.core;
        core.note(format!("{} aborts: {} ({})", core.role.alias(), fault.code, fault.reason));
        let out = core.out(0, Message::Abort { code: fault.code, reason: fault.reason.clone() });
        core.abort = Some(AbortInfo { by: core.role, step: out.step, code: fault.code, reason: fault.reason });
        let mut outs = vec![out];
        if core.cfg.flow.has_funds() && core.genesis.is_some() {
            core.stage = Stage::Aborting;
            outs.extend(self.reclaim());
        } else {
            core.finished = true;
        }
        outs
    }

    fn reclaim(&mut self) -> Vec<Out> {
        let claims = self.logic.reclaimable(&self.core);
        let height = self.core.cfg.refund_height();
        self.core.sweep(claims, height)
    }
}

impl<F: FlowLogic> Party for Machine<F> {
    fn role(&self) -> Role {
        self.core.role
    }

    fn phase(&self) -> &'static str {
        if self.core.finished {
            return if self.core.abort.is_some() { "aborted" } else { "done" };
        }
        match self.core.stage {
            Stage::Running => self.core.phase,
            Stage::Aborting | Stage::PeerAborted => "reclaim",
        }
    }

    fn start(&mut self) -> Vec<Out> {
        if self.core.role != Role::Challenger {
            return Vec::new();
        }
        let msg = Message::Hello { wallet: self.core.wallet.address(), params: Some(self.core.cfg.public_params()) };
        vec![self.core.out(0, msg)]
    }

    fn handle(&mut self, msg: &Message) -> Vec<Out> {
        if self.core.finished {
            return Vec::new();
        }
        match msg {
            Message::Hello { wallet, params } if self.core.genesis.is_none() => {
                let mut outs = Vec::new();
                if self.core.role == Role::Accepter {
                    if let Some(p) = params {
                        self.core.cfg.apply_params(p);
                    }
                    self.core.set_genesis(*wallet);
                    let reply = Message::Hello { wallet: self.core.wallet.address(), params: None };
                    outs.push(self.core.out(0, reply));
                } else {
                    self.core.set_genesis(*wallet);
                }
                outs.extend(self.run(|l, c| l.on_ready(c)));
                outs
            }
            Message::Abort { code, reason } => {
                let step = self.core.last_step.unwrap_or(0);
                let peer = self.core.role.peer();
                self.core.note(format!("{} aborted: {code} ({reason})", peer.alias()));
                if self.core.stage == Stage::Running {
                    self.core.abort = Some(AbortInfo { by: peer, step, code: *code, reason: reason.clone() });
                    if self.core.cfg.flow.has_funds() && self.core.genesis.is_some() {
                        self.core.stage = Stage::PeerAborted;
                    } else {
                        self.core.finished = true;
                    }
                }
                Vec::new()
            }
            Message::Advance { height } => {
                self.core.ledger.advance_to(*height);
                Vec::new()
            }
            Message::Broadcast { txs } if self.core.stage != Stage::Running => {
                // Reclaims may legitimately fail against a replica that has
                // already diverged from the peer's; they are informational.
                for tx in txs {
                    let _ = self.core.ledger.apply(tx);
                }
                let outs = if self.core.stage == Stage::PeerAborted { self.reclaim() } else { Vec::new() };
                self.core.finished = true;
                outs
            }
            Message::Broadcast { txs } => {
                if let Err(fault) = self.logic.precheck(&self.core, txs).and_then(|_| self.core.apply_peer(txs)) {
                    return self.abort(fault);
                }
                self.run(|l, c| l.on_message(c, msg))
            }
            _ if self.core.stage == Stage::Running && self.core.genesis.is_some() => self.run(|l, c| l.on_message(c, msg)),
            _ => Vec::new(),
        }
    }

    fn pending(&self) -> Option<DecisionKind> {
        if self.core.finished || self.core.stage != Stage::Running {
            return None;
        }
        self.logic.pending(&self.core)
    }

    fn auto_decision(&self) -> Option<Decision> {
        self.pending()?;
        self.logic.auto_decision(&self.core)
    }

    fn decide(&mut self, decision: Decision) -> Result<Vec<Out>, ProtocolError> {
        let fits = match (self.pending(), decision) {
            (Some(DecisionKind::Hide | DecisionKind::Guess), Decision::Choose(i)) => i < self.core.cfg.n,
            (Some(DecisionKind::Reveal), Decision::Reveal) => true,
            _ => false,
        };
        if !fits {
            return Err(ProtocolError::OutOfPhase(decision));
        }
        Ok(self.run(|l, c| l.decide(c, decision)))
    }

    fn on_timeout(&mut self) -> Vec<Out> {
        if self.core.finished {
            return Vec::new();
        }
        match self.core.stage {
            Stage::Running => {
                let phase = self.core.phase;
                self.abort(Fault::new(AbortCode::PeerTimeout, format!("peer silent in phase {phase}")))
            }
            Stage::Aborting => {
                self.core.finished = true;
                Vec::new()
            }
            Stage::PeerAborted => {
                let outs = self.reclaim();
                self.core.finished = true;
                outs
            }
        }
    }

    fn fail(&mut self, code: AbortCode, reason: &str) -> Vec<Out> {
        if self.core.finished {
            return Vec::new();
        }
        match self.core.stage {
            Stage::Running => self.abort(Fault::new(code, reason)),
            _ => self.on_timeout(),
        }
    }

    fn is_finished(&self) -> bool {
        self.core.finished
    }

    fn is_stalled(&self) -> bool {
        !self.core.finished && self.core.stage == Stage::Running && self.logic.stalled(&self.core)
    }

    fn abort_info(&self) -> Option<&AbortInfo> {
        self.core.abort.as_ref()
    }

    fn verdict(&self) -> Option<bool> {
        self.core.verdict
    }

    fn choice(&self) -> Option<usize> {
        self.logic.choice()
    }

    fn ledger(&self) -> &LedgerState {
        &self.core.ledger
    }

    fn wallet(&self) -> Address {
        self.core.wallet.address()
    }

    fn notes(&self) -> &[String] {
        &self.core.notes
    }

    fn view(&self) -> PlayerView {
        let mut view = PlayerView {
            role: self.core.role,
            flow: self.core.cfg.flow,
            phase: self.phase().to_string(),
            pending: self.pending(),
            n: self.core.cfg.n,
            height: self.core.ledger.height(),
            t1: self.core.cfg.t1,
            h_list: Vec::new(),
            addresses: BTreeMap::new(),
            my_choice: self.logic.choice().map(|i| i + 1),
            accepter_won: self.core.verdict,
            abort: self.core.abort.clone(),
            finished: self.core.finished,
            utxos: self
                .core
                .ledger
                .utxos()
                .map(|(op, o)| UtxoView { outpoint: op.to_string(), amount: o.amount, cond: o.cond.to_string() })
                .collect(),
        };
        view.addresses.insert("wallet".into(), self.core.wallet.address());
        if let Some(peer) = self.core.peer_wallet {
            view.addresses.insert("peer_wallet".into(), peer);
        }
        self.logic.fill_view(&self.core, &mut view);
        view
    }

    fn secret_material(&self) -> Vec<Scalar> {
        let mut s = self.logic.secrets();
        s.push(self.core.wallet.secret());
        s
    }
}

/// Builds the state machine for `role` in `cfg.flow`.
pub fn make_party(cfg: &SessionConfig, role: Role, seed: [u8; 32], session: SessionId) -> Result<Box<dyn Party>, ProtocolError> {
    cfg.validate()?;
    let core = Core::new(cfg.clone(), role, seed, session);
    Ok(match (cfg.flow, role) {
        (Flow::Covenant, Role::Challenger) => Box::new(Machine { logic: covenant::Alice::new(&core), core }),
        (Flow::Covenant, Role::Accepter) => Box::new(Machine { logic: covenant::Bob::new(&core), core }),
        (Flow::OpRand, Role::Challenger) => Box::new(Machine { logic: oprand::Challenger::new(&core)?, core }),
        (Flow::OpRand, Role::Accepter) => Box::new(Machine { logic: oprand::Accepter::new(&core), core }),
        (Flow::Thimbles, Role::Challenger) => Box::new(Machine { logic: thimbles::Alice::new(&core)?, core }),
        (Flow::Thimbles, Role::Accepter) => Box::new(Machine { logic: thimbles::Bob::new(&core), core }),
        (Flow::Trace, _) => return Err(ProtocolError::BadConfig("the trace flow has a single party; use trace::run".into())),
    })
}
