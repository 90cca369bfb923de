//! EC-point covenant: Bob's output key is `P_b + hash_p(P_a)·G`, so he can
//! only sign for it after Alice's spend reveals `P_a`.

use super::party::{session_genesis, sign_input, wallet_key, Claim, Core, Fault, FlowLogic, PlayerView};
use super::{forge_proof, AbortCode, Cheat, Message, Out, ProtocolError, Role, SessionConfig};
use crate::commitments::{assemble, derive_spend_key};
use crate::group::{hash_160, hash_p_point, keygen, Address, GroupPoint, KeyPair, Scalar};
use crate::ledger::{LedgerState, OutPoint, SpendCondition, Transaction, TxOut};
use crate::proofs::{BackendTag, Statement, WitnessData};

/// The key a party uses for the covenant, derived from its party seed.
pub fn protocol_key(party_seed: &[u8; 32]) -> KeyPair {
    keygen(&[&party_seed[..], b"covenant"].concat())
}

fn output_cond(addr: Address, refund: Address, height: u64, timelocked: bool) -> SpendCondition {
    let main = SpendCondition::p2pkh(addr);
    if timelocked {
        SpendCondition::any_of(vec![main, SpendCondition::time_locked(SpendCondition::p2pkh(refund), height)])
    } else {
        main
    }
}

fn branch(timelocked: bool, index: u32) -> Option<u32> {
    timelocked.then_some(index)
}

/// TX₂: Alice spends TX₁ output 1, revealing `P_a`.
pub fn spend_alice(
    sk_a: &Scalar,
    tx1: &Transaction,
    timelocked: bool,
    to: Address,
    ledger: &LedgerState,
) -> Result<(LedgerState, Transaction), ProtocolError> {
    let out = &tx1.outputs[0];
    let mut tx2 = Transaction::new(vec![tx1.outpoint(0)], vec![TxOut { amount: out.amount, cond: SpendCondition::p2pkh(to) }]);
    sign_input(&mut tx2, 0, sk_a, branch(timelocked, 0));
    Ok((ledger.apply_transaction(&tx2)?, tx2))
}

/// TX₃: Bob scans the ledger for the spend of TX₁ output 1, extracts `P_a`
/// from its witness and signs for `P_b + hash_p(P_a)·G`. Returns the
/// extracted key alongside the new ledger.
pub fn spend_bob(
    sk_b: &Scalar,
    tx1: &Transaction,
    timelocked: bool,
    to: Address,
    ledger: &LedgerState,
) -> Result<(LedgerState, Transaction, GroupPoint), ProtocolError> {
    let (spender, input) = ledger.spender(&tx1.outpoint(0)).ok_or(ProtocolError::NotYetRevealed)?;
    let p_a = spender.inputs[input].witness.revealed_key().ok_or(ProtocolError::NotYetRevealed)?;
    let sk = derive_spend_key(&hash_p_point(&p_a), sk_b)?;
    let out = &tx1.outputs[1];
    let mut tx3 = Transaction::new(vec![tx1.outpoint(1)], vec![TxOut { amount: out.amount, cond: SpendCondition::p2pkh(to) }]);
    sign_input(&mut tx3, 0, &sk, branch(timelocked, 0));
    Ok((ledger.apply_transaction(&tx3)?, tx3, p_a))
}

/// Ledger state once TX₁ is confirmed, with every key involved.
pub struct CovenantOpen {
    pub ledger: LedgerState,
    pub tx1: Transaction,
    pub alice: KeyPair,
    pub bob: KeyPair,
    pub alice_wallet: KeyPair,
    pub bob_wallet: KeyPair,
}

/// Performs the honest setup non-interactively: both deposits funded, TX₁
/// built by Bob, co-signed by both and confirmed. Uses the same keys an
/// interactive session with `cfg` would.
pub fn open(cfg: &SessionConfig) -> Result<CovenantOpen, ProtocolError> {
    cfg.validate()?;
    let (sa, sb) = (cfg.party_seed(Role::Challenger), cfg.party_seed(Role::Accepter));
    let (alice, bob) = (protocol_key(&sa), protocol_key(&sb));
    let (alice_wallet, bob_wallet) = (wallet_key(&sa), wallet_key(&sb));
    let (mut ledger, genesis) = session_genesis(cfg.deposit(), alice_wallet.address(), bob_wallet.address());
    let c = hash_p_point(&alice.public()).base_mul();
    let addr_b = hash_160(&assemble(&bob.public(), &c)?.key).expect("non-identity");
    let deposit = cfg.deposit();
    let mut tx1 = Transaction::new(
        vec![OutPoint::new(genesis, 0), OutPoint::new(genesis, 1)],
        vec![
            TxOut { amount: deposit, cond: output_cond(alice.address(), alice_wallet.address(), cfg.t1, cfg.timelocked) },
            TxOut { amount: deposit, cond: output_cond(addr_b, bob_wallet.address(), cfg.t2(), cfg.timelocked) },
        ],
    );
    sign_input(&mut tx1, 0, &alice_wallet.secret(), None);
    sign_input(&mut tx1, 1, &bob_wallet.secret(), None);
    ledger.apply(&tx1)?;
    Ok(CovenantOpen { ledger, tx1, alice, bob, alice_wallet, bob_wallet })
}

pub(crate) struct Alice {
    key: KeyPair,
    addr_a: Option<Address>,
    tx1: Option<Transaction>,
}

impl Alice {
    pub fn new(core: &Core) -> Self {
        Alice { key: protocol_key(&core.seed), addr_a: None, tx1: None }
    }

    fn expected_cond(&self, core: &Core) -> SpendCondition {
        output_cond(self.addr_a.unwrap(), core.wallet.address(), core.cfg.t1, core.cfg.timelocked)
    }
}

impl FlowLogic for Alice {
    fn on_ready(&mut self, core: &mut Core) -> Result<Vec<Out>, Fault> {
        let p_a = self.key.public();
        let c = hash_p_point(&p_a).base_mul();
        let addr_a = if core.cheat(Cheat::ChallengerBadAddr) {
            hash_160(&(p_a + GroupPoint::GENERATOR)).expect("non-identity")
        } else {
            self.key.address()
        };
        self.addr_a = Some(addr_a);
        let stmt = Statement::Rc { addr_a, c };
        let pi_c = core
            .proofs
            .prove(&stmt, &WitnessData::Rc { p_a }, BackendTag::Ideal)
            .unwrap_or_else(|_| forge_proof(&stmt));
        core.note("1. Alice publishes addr_a = hash160(P_a), C = hash_p(P_a)·G and the proof π_c");
        core.phase = "await-tx1";
        let refund = core.wallet.address();
        Ok(vec![core.out(1, Message::CovenantCommit { addr_a, c, refund, pi_c })])
    }

    fn on_message(&mut self, core: &mut Core, msg: &Message) -> Result<Vec<Out>, Fault> {
        match (core.phase, msg) {
            ("await-tx1", Message::CovenantTx1 { tx1 }) => {
                let deposit = core.cfg.deposit();
                let shape_ok = tx1.inputs.len() == 2
                    && tx1.inputs[0].outpoint == core.funding(super::Role::Challenger)
                    && tx1.inputs[1].outpoint == core.funding(super::Role::Accepter)
                    && tx1.outputs.len() == 2
                    && tx1.outputs[0] == TxOut { amount: deposit, cond: self.expected_cond(core) }
                    && tx1.outputs[1].amount == deposit;
                if !shape_ok {
                    return Err(Fault::new(AbortCode::BadMessage, "TX1 does not pay addr_a the agreed amount"));
                }
                if core.cheat(Cheat::ChallengerRefuse) {
                    return Err(Fault::new(AbortCode::RefusalToSign, "Alice declines to co-sign TX1"));
                }
                let mut tx1 = tx1.clone();
                sign_input(&mut tx1, 0, &core.wallet.secret(), None);
                core.ledger.validate(&tx1).map_err(|e| Fault::new(AbortCode::LedgerRejected, format!("TX1 invalid: {e}")))?;
                core.note("4. Alice co-signs TX1 and broadcasts it");
                let mut outs = vec![core.broadcast(4, vec![tx1.clone()])];
                let (_, tx2) = spend_alice(&self.key.secret(), &tx1, core.cfg.timelocked, core.wallet.address(), &core.ledger)
                    .map_err(|e| Fault::new(AbortCode::LedgerRejected, e.to_string()))?;
                core.note("Alice spends TX1 output 1 with TX2, revealing P_a in its witness");
                outs.push(core.broadcast(5, vec![tx2]));
                self.tx1 = Some(tx1);
                core.phase = "await-tx3";
                Ok(outs)
            }
            ("await-tx3", Message::Broadcast { .. }) => {
                let tx1 = self.tx1.as_ref().unwrap();
                if !core.ledger.is_unspent(&tx1.outpoint(1)) {
                    core.phase = "done";
                    core.finished = true;
                }
                Ok(Vec::new())
            }
            _ => Err(Fault::unexpected(core.phase, msg)),
        }
    }

    fn reclaimable(&self, core: &Core) -> Vec<Claim> {
        let mut claims = vec![Claim {
            outpoint: core.own_funding(),
            amount: core.cfg.deposit(),
            key: core.wallet.secret(),
            branch: None,
        }];
        if let Some(tx1) = &self.tx1 {
            claims.push(Claim {
                outpoint: tx1.outpoint(0),
                amount: tx1.outputs[0].amount,
                key: self.key.secret(),
                branch: branch(core.cfg.timelocked, 0),
            });
        }
        claims
    }

    fn secrets(&self) -> Vec<Scalar> {
        vec![self.key.secret()]
    }

    fn fill_view(&self, _core: &Core, view: &mut PlayerView) {
        if let Some(a) = self.addr_a {
            view.addresses.insert("addr_a".into(), a);
        }
    }
}

pub(crate) struct Bob {
    key: KeyPair,
    addr_b: Option<Address>,
    tx1: Option<Transaction>,
}

impl Bob {
    pub fn new(core: &Core) -> Self {
        Bob { key: protocol_key(&core.seed), addr_b: None, tx1: None }
    }
}

impl FlowLogic for Bob {
    fn on_ready(&mut self, core: &mut Core) -> Result<Vec<Out>, Fault> {
        core.phase = "await-commit";
        Ok(Vec::new())
    }

    fn on_message(&mut self, core: &mut Core, msg: &Message) -> Result<Vec<Out>, Fault> {
        match (core.phase, msg) {
            ("await-commit", Message::CovenantCommit { addr_a, c, refund, pi_c }) => {
                let stmt = Statement::Rc { addr_a: *addr_a, c: *c };
                if !core.proofs.verify(&stmt, pi_c).unwrap_or(false) {
                    return Err(Fault::proof("pi_c", 2));
                }
                core.note("2. Bob verifies π_c and derives addr_b = hash160(P_b + C)");
                let r = assemble(&self.key.public(), c).map_err(|e| Fault::new(AbortCode::BadMessage, e.to_string()))?;
                let addr_b = hash_160(&r.key).expect("non-identity");
                self.addr_b = Some(addr_b);
                let (t1, t2, tl) = (core.cfg.t1, core.cfg.t2(), core.cfg.timelocked);
                let deposit = core.cfg.deposit();
                let mut tx1 = Transaction::new(
                    vec![core.funding(super::Role::Challenger), core.own_funding()],
                    vec![
                        TxOut { amount: deposit, cond: output_cond(*addr_a, *refund, t1, tl) },
                        TxOut { amount: deposit, cond: output_cond(addr_b, core.wallet.address(), t2, tl) },
                    ],
                );
                sign_input(&mut tx1, 1, &core.wallet.secret(), None);
                self.tx1 = Some(tx1.clone());
                core.note("3. Bob builds TX1 paying addr_a and addr_b, signs his input and sends it to Alice");
                core.phase = "await-tx2";
                Ok(vec![core.out(3, Message::CovenantTx1 { tx1 })])
            }
            ("await-tx2", Message::Broadcast { .. }) => {
                let tx1 = self.tx1.clone().unwrap();
                if !core.ledger.contains(&tx1.txid()) {
                    return Ok(Vec::new());
                }
                match spend_bob(&self.key.secret(), &tx1, core.cfg.timelocked, core.wallet.address(), &core.ledger) {
                    Err(ProtocolError::NotYetRevealed) => {
                        core.note("Bob cannot spend TX1 output 2 yet: P_a is not revealed");
                        Ok(Vec::new())
                    }
                    Err(e) => Err(Fault::new(AbortCode::LedgerRejected, e.to_string())),
                    Ok((_, tx3, _)) => {
                        core.note("Bob extracts P_a from TX2 and spends TX1 output 2 with key hash_p(P_a) + sk_b");
                        let out = core.broadcast(6, vec![tx3]);
                        core.phase = "done";
                        core.finished = true;
                        Ok(vec![out])
                    }
                }
            }
            _ => Err(Fault::unexpected(core.phase, msg)),
        }
    }

    fn reclaimable(&self, core: &Core) -> Vec<Claim> {
        let mut claims = vec![Claim {
            outpoint: core.own_funding(),
            amount: core.cfg.deposit(),
            key: core.wallet.secret(),
            branch: None,
        }];
        if let (Some(tx1), true) = (&self.tx1, core.cfg.timelocked) {
            claims.push(Claim {
                outpoint: tx1.outpoint(1),
                amount: tx1.outputs[1].amount,
                key: core.wallet.secret(),
                branch: Some(1),
            });
        }
        claims
    }

    fn secrets(&self) -> Vec<Scalar> {
        vec![self.key.secret()]
    }

    fn fill_view(&self, _core: &Core, view: &mut PlayerView) {
        if let Some(b) = self.addr_b {
            view.addresses.insert("addr_b".into(), b);
        }
    }
}
