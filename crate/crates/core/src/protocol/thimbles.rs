//! The thimbles game: Alice hides a ball under one of `n` thimbles, Bob
//! guesses, and the 10₿ pot settles on the ledger without a referee.

use super::party::{sign_input, Claim, Core, Fault, FlowLogic, PlayerView};
use super::{forge_proof, AbortCode, Cheat, Decision, DecisionKind, Message, Out, Role};
use crate::commitments::{assemble, derive_spend_key, gen_commitment_set, rank2, CommitmentError, CommitmentSet};
use crate::group::{hash_160, keygen, sig_gen, Address, GroupPoint, KeyPair, Scalar};
use crate::ledger::{SpendCondition, Transaction, TxOut};
use crate::proofs::{BackendTag, KeyBinding, KeyKnowledge, Statement, WitnessData};

pub fn protocol_key(party_seed: &[u8; 32]) -> KeyPair {
    keygen(&[&party_seed[..], b"thimbles"].concat())
}

pub fn commitment_set(party_seed: &[u8; 32], n: usize) -> Result<CommitmentSet, CommitmentError> {
    gen_commitment_set(&[&party_seed[..], b"set"].concat(), n)
}

/// `AnyOf[P2PKH(addr_b), TimeLocked(P2PK(P_a), t₁)]`.
pub fn pot_condition(addr_b: Address, p_a: GroupPoint, t1: u64) -> SpendCondition {
    SpendCondition::any_of(vec![SpendCondition::p2pkh(addr_b), SpendCondition::time_locked(SpendCondition::p2pk(p_a), t1)])
}

/// Bob's settlement of TX₂: recovers `A_x` from the key Alice revealed,
/// and signs branch 0 with `hash_p(A_x) + sk_b`. Valid only when his guess
/// was right.
pub fn settle_tx(tx2: &Transaction, p_a: &GroupPoint, sk_b: &Scalar, to: Address) -> Result<Transaction, CommitmentError> {
    let revealed = tx2.inputs[0].witness.revealed_key().ok_or(CommitmentError::IdentityPoint)?;
    let h_x = rank2(&(revealed - *p_a))?;
    let sk = derive_spend_key(&h_x, sk_b)?;
    let out = &tx2.outputs[0];
    let mut tx = Transaction::new(vec![tx2.outpoint(0)], vec![TxOut { amount: out.amount, cond: SpendCondition::p2pkh(to) }]);
    sign_input(&mut tx, 0, &sk, Some(0));
    Ok(tx)
}

/// Alice's refund through the timelocked branch of TX₂.
pub fn refund_tx(tx2: &Transaction, sk_a: &Scalar, to: Address) -> Transaction {
    let out = &tx2.outputs[0];
    let mut tx = Transaction::new(vec![tx2.outpoint(0)], vec![TxOut { amount: out.amount, cond: SpendCondition::p2pkh(to) }]);
    sign_input(&mut tx, 0, sk_a, Some(1));
    tx
}

fn foreign_point(label: &str) -> GroupPoint {
    keygen(format!("randlock/foreign/{label}").as_bytes()).public()
}

pub(crate) struct Alice {
    key: KeyPair,
    set: CommitmentSet,
    x: Option<usize>,
    addr_a: Option<Address>,
    addr_b: Option<Address>,
    tx1: Option<Transaction>,
    tx2: Option<Transaction>,
}

impl Alice {
    pub fn new(core: &Core) -> Result<Self, CommitmentError> {
        Ok(Alice {
            key: protocol_key(&core.seed),
            set: commitment_set(&core.seed, core.cfg.n)?,
            x: None,
            addr_a: None,
            addr_b: None,
            tx1: None,
            tx2: None,
        })
    }

    fn opening_key(&self, index: usize) -> Scalar {
        self.key.secret() + self.set.triples()[index].secret
    }
}

impl FlowLogic for Alice {
    fn on_ready(&mut self, core: &mut Core) -> Result<Vec<Out>, Fault> {
        core.phase = "hide";
        Ok(Vec::new())
    }

    fn pending(&self, core: &Core) -> Option<DecisionKind> {
        match core.phase {
            "hide" => Some(DecisionKind::Hide),
            "reveal" => Some(DecisionKind::Reveal),
            _ => None,
        }
    }

    fn auto_decision(&self, core: &Core) -> Option<Decision> {
        match core.phase {
            "hide" => Some(Decision::Choose(core.cfg.x.map(|x| x - 1).unwrap_or_else(|| core.seeded_index("choice")))),
            "reveal" => Some(Decision::Reveal),
            _ => None,
        }
    }

    fn decide(&mut self, core: &mut Core, d: Decision) -> Result<Vec<Out>, Fault> {
        match d {
            Decision::Choose(x) => {
                self.x = Some(x);
                let p_a = self.key.public();
                let a_x = if core.cheat(Cheat::ChallengerBadAddr) { foreign_point("challenger") } else { self.set.triples()[x].rank1 };
                let addr_a = hash_160(&(p_a + a_x)).expect("non-identity");
                self.addr_a = Some(addr_a);
                let h_list = self.set.public().h_list;
                let stmt = Statement::Ra { h_list: h_list.clone(), p_a, binding: KeyBinding::Address(addr_a) };
                let wit = WitnessData::Ra { secrets: self.set.secrets(), selected: x };
                let pi_a = core.proofs.prove(&stmt, &wit, BackendTag::Ideal).unwrap_or_else(|_| forge_proof(&stmt));
                core.note(format!(
                    "1. Alice hides the ball under one of {} thimbles: publishes H_1..H_{}, addr_a = hash160(P_a + A_x) and π_a",
                    core.cfg.n, core.cfg.n
                ));
                let tx1 = Transaction::new(
                    vec![core.own_funding()],
                    vec![TxOut { amount: core.cfg.deposit(), cond: SpendCondition::p2pkh(addr_a) }],
                );
                core.note("2. Alice prepares TX1 locking her deposit to addr_a");
                self.tx1 = Some(tx1.clone());
                core.phase = "await-choice";
                Ok(vec![core.out(2, Message::ThimblesOffer { p_a, h_list, addr_a, pi_a, tx1 })])
            }
            Decision::Reveal => {
                if core.cheat(Cheat::ChallengerRefuse) {
                    return Err(Fault::new(AbortCode::RefusalToSign, "Alice declines to complete TX2"));
                }
                let x = self.x.unwrap();
                let opened = if core.cheat(Cheat::ChallengerBadReveal) { (x + 1) % self.set.len() } else { x };
                let mut tx1 = self.tx1.clone().unwrap();
                sign_input(&mut tx1, 0, &core.wallet.secret(), None);
                let mut tx2 = self.tx2.clone().unwrap();
                sign_input(&mut tx2, 0, &self.opening_key(opened), None);
                core.note("5. Alice completes TX2 with the witness ⟨P_a + A_x, σ⟩, revealing her choice");
                core.note("6. Alice broadcasts TX1 and TX2");
                self.tx1 = Some(tx1.clone());
                self.tx2 = Some(tx2.clone());
                core.phase = "await-settle";
                Ok(vec![core.broadcast(6, vec![tx1, tx2])])
            }
        }
    }

    fn on_message(&mut self, core: &mut Core, msg: &Message) -> Result<Vec<Out>, Fault> {
        match (core.phase, msg) {
            ("await-choice", Message::ThimblesChoice { addr_b, pi_r, tx2 }) => {
                let h_list = self.set.public().h_list;
                let stmt = Statement::Rr { binding: KeyBinding::Address(*addr_b), h_list };
                if !core.proofs.verify(&stmt, pi_r).unwrap_or(false) {
                    return Err(Fault::proof("pi_r", 5));
                }
                let tx1 = self.tx1.as_ref().unwrap();
                let expected = TxOut { amount: 2 * core.cfg.deposit(), cond: pot_condition(*addr_b, self.key.public(), core.cfg.t1) };
                let shape_ok = tx2.inputs.len() == 2
                    && tx2.inputs[0].outpoint == tx1.outpoint(0)
                    && tx2.inputs[1].outpoint == core.funding(Role::Accepter)
                    && tx2.outputs == vec![expected];
                if !shape_ok {
                    return Err(Fault::new(AbortCode::BadMessage, "TX2 does not lock the pot as agreed"));
                }
                core.note("5. Alice verifies π_r");
                self.addr_b = Some(*addr_b);
                self.tx2 = Some(tx2.clone());
                core.phase = "reveal";
                Ok(Vec::new())
            }
            ("await-settle", Message::Broadcast { .. }) => {
                let pot = self.tx2.as_ref().unwrap().outpoint(0);
                if !core.ledger.is_unspent(&pot) {
                    core.note("Bob guessed right and takes the pot");
                    core.verdict = Some(true);
                    core.phase = "done";
                    core.finished = true;
                }
                Ok(Vec::new())
            }
            ("await-settle", Message::ThimblesPass {}) => {
                core.verdict = Some(false);
                core.note(format!("Bob guessed wrong; Alice waits for height {} and reclaims the pot", core.cfg.t1));
                let tx2 = self.tx2.as_ref().unwrap();
                let claim = Claim { outpoint: tx2.outpoint(0), amount: tx2.outputs[0].amount, key: self.key.secret(), branch: Some(1) };
                let outs = core.sweep(vec![claim], core.cfg.t1);
                core.phase = "done";
                core.finished = true;
                Ok(outs)
            }
            _ => Err(Fault::unexpected(core.phase, msg)),
        }
    }

    fn reclaimable(&self, core: &Core) -> Vec<Claim> {
        let mut claims = vec![Claim { outpoint: core.own_funding(), amount: core.cfg.deposit(), key: core.wallet.secret(), branch: None }];
        if let (Some(tx1), Some(x)) = (&self.tx1, self.x) {
            claims.push(Claim { outpoint: tx1.outpoint(0), amount: tx1.outputs[0].amount, key: self.opening_key(x), branch: None });
        }
        if let Some(tx2) = &self.tx2 {
            claims.push(Claim { outpoint: tx2.outpoint(0), amount: tx2.outputs[0].amount, key: self.key.secret(), branch: Some(1) });
        }
        claims
    }

    fn choice(&self) -> Option<usize> {
        self.x
    }

    fn secrets(&self) -> Vec<Scalar> {
        let mut s = self.set.secrets();
        s.push(self.key.secret());
        s
    }

    fn fill_view(&self, _core: &Core, view: &mut PlayerView) {
        view.h_list = self.set.public().h_list;
        if let Some(a) = self.addr_a {
            view.addresses.insert("addr_a".into(), a);
        }
        if let Some(b) = self.addr_b {
            view.addresses.insert("addr_b".into(), b);
        }
    }
}

pub(crate) struct Bob {
    key: KeyPair,
    y: Option<usize>,
    p_a: Option<GroupPoint>,
    h_list: Vec<GroupPoint>,
    addr_a: Option<Address>,
    addr_b: Option<Address>,
    tx1: Option<Transaction>,
    tx2: Option<Transaction>,
}

impl Bob {
    pub fn new(core: &Core) -> Self {
        Bob {
            key: protocol_key(&core.seed),
            y: None,
            p_a: None,
            h_list: Vec::new(),
            addr_a: None,
            addr_b: None,
            tx1: None,
            tx2: None,
        }
    }
}

impl FlowLogic for Bob {
    fn on_ready(&mut self, core: &mut Core) -> Result<Vec<Out>, Fault> {
        core.phase = "await-offer";
        Ok(Vec::new())
    }

    fn on_message(&mut self, core: &mut Core, msg: &Message) -> Result<Vec<Out>, Fault> {
        match (core.phase, msg) {
            ("await-offer", Message::ThimblesOffer { p_a, h_list, addr_a, pi_a, tx1 }) => {
                if h_list.len() != core.cfg.n {
                    return Err(Fault::new(AbortCode::BadMessage, format!("offer has {} thimbles, expected {}", h_list.len(), core.cfg.n)));
                }
                let stmt = Statement::Ra { h_list: h_list.clone(), p_a: *p_a, binding: KeyBinding::Address(*addr_a) };
                if !core.proofs.verify(&stmt, pi_a).unwrap_or(false) {
                    return Err(Fault::proof("pi_a", 3));
                }
                let expected = TxOut { amount: core.cfg.deposit(), cond: SpendCondition::p2pkh(*addr_a) };
                if tx1.inputs.len() != 1 || tx1.inputs[0].outpoint != core.funding(Role::Challenger) || tx1.outputs != vec![expected] {
                    return Err(Fault::new(AbortCode::BadMessage, "TX1 does not lock Alice's deposit to addr_a"));
                }
                core.note("3. Bob verifies π_a");
                self.p_a = Some(*p_a);
                self.h_list = h_list.clone();
                self.addr_a = Some(*addr_a);
                self.tx1 = Some(tx1.clone());
                core.phase = "guess";
                Ok(Vec::new())
            }
            ("await-reveal", Message::Broadcast { .. }) => {
                let tx2 = self.tx2.as_ref().unwrap();
                let Some(completed) = core.ledger.transaction(&tx2.txid()).cloned() else {
                    return Err(Fault::new(AbortCode::LedgerRejected, "TX2 was not confirmed"));
                };
                let addr_b = self.addr_b.unwrap();
                let settle = settle_tx(&completed, &self.p_a.unwrap(), &self.key.secret(), core.wallet.address())
                    .map_err(|e| Fault::new(AbortCode::CommitmentMismatch, e.to_string()))?;
                let key = settle.inputs[0].witness.revealed_key().unwrap();
                if hash_160(&key).ok() == Some(addr_b) {
                    core.note("7. Bob recovers A_x from TX2's witness; hash_p(A_x) + sk_b opens addr_b, so he takes the pot");
                    core.verdict = Some(true);
                    core.phase = "done";
                    core.finished = true;
                    Ok(vec![core.broadcast(7, vec![settle])])
                } else {
                    core.note("7. Bob recovers A_x from TX2's witness; hash_p(A_x) + sk_b does not open addr_b");
                    core.verdict = Some(false);
                    core.phase = "await-refund";
                    Ok(vec![core.out(7, Message::ThimblesPass {})])
                }
            }
            ("await-refund", Message::Broadcast { .. }) => {
                if !core.ledger.is_unspent(&self.tx2.as_ref().unwrap().outpoint(0)) {
                    core.phase = "done";
                    core.finished = true;
                }
                Ok(Vec::new())
            }
            _ => Err(Fault::unexpected(core.phase, msg)),
        }
    }

    fn precheck(&self, core: &Core, txs: &[Transaction]) -> Result<(), Fault> {
        let (Some(tx1), Some(addr_a)) = (&self.tx1, self.addr_a) else { return Ok(()) };
        let target = tx1.outpoint(0);
        for tx in txs {
            for input in tx.inputs.iter().filter(|i| i.outpoint == target) {
                let opens = input.witness.revealed_key().and_then(|k| hash_160(&k).ok()) == Some(addr_a);
                if !opens && core.phase == "await-reveal" {
                    return Err(Fault::new(AbortCode::CommitmentMismatch, "the key revealed in TX2 does not open addr_a"));
                }
            }
        }
        Ok(())
    }

    fn pending(&self, core: &Core) -> Option<DecisionKind> {
        (core.phase == "guess").then_some(DecisionKind::Guess)
    }

    fn auto_decision(&self, core: &Core) -> Option<Decision> {
        Some(Decision::Choose(core.cfg.y.map(|y| y - 1).unwrap_or_else(|| core.seeded_index("choice"))))
    }

    fn decide(&mut self, core: &mut Core, d: Decision) -> Result<Vec<Out>, Fault> {
        let Decision::Choose(y) = d else { unreachable!("checked by the machine") };
        self.y = Some(y);
        if core.cheat(Cheat::AccepterStall) {
            core.phase = "stalled";
            return Ok(Vec::new());
        }
        let p_b = if core.cheat(Cheat::AccepterNoKey) { foreign_point("accepter") } else { self.key.public() };
        let mut r = assemble(&p_b, &self.h_list[y]).map_err(|e| Fault::new(AbortCode::BadMessage, e.to_string()))?.key;
        if core.cheat(Cheat::AccepterBadAddr) {
            r = r + GroupPoint::GENERATOR;
        }
        let addr_b = hash_160(&r).expect("non-identity");
        self.addr_b = Some(addr_b);
        let sigma = sig_gen(&self.key.secret(), &addr_b.0).expect("nonzero key");
        let binding = KeyBinding::Address(addr_b);
        let stmt = Statement::Rr { binding, h_list: self.h_list.clone() };
        let wit = WitnessData::Rr { p_b, knowledge: KeyKnowledge::Signature(sigma), selected: y };
        let pi_r = core.proofs.prove(&stmt, &wit, BackendTag::Ideal).unwrap_or_else(|_| forge_proof(&stmt));
        core.note("3. Bob picks a thimble, derives addr_b = hash160(P_b + H_y), signs addr_b and proves π_r");

        let tx1 = self.tx1.as_ref().unwrap();
        let mut tx2 = Transaction::new(
            vec![tx1.outpoint(0), core.own_funding()],
            vec![TxOut { amount: 2 * core.cfg.deposit(), cond: pot_condition(addr_b, self.p_a.unwrap(), core.cfg.t1) }],
        );
        sign_input(&mut tx2, 1, &core.wallet.secret(), None);
        core.note(format!("4. Bob builds TX2 paying addr_b, or Alice after height {}, and signs his input", core.cfg.t1));
        self.tx2 = Some(tx2.clone());
        core.phase = "await-reveal";
        Ok(vec![core.out(4, Message::ThimblesChoice { addr_b, pi_r, tx2 })])
    }

    fn reclaimable(&self, core: &Core) -> Vec<Claim> {
        vec![Claim { outpoint: core.own_funding(), amount: core.cfg.deposit(), key: core.wallet.secret(), branch: None }]
    }

    fn choice(&self) -> Option<usize> {
        self.y
    }

    fn stalled(&self, core: &Core) -> bool {
        core.phase == "stalled"
    }

    fn secrets(&self) -> Vec<Scalar> {
        vec![self.key.secret()]
    }

    fn fill_view(&self, _core: &Core, view: &mut PlayerView) {
        view.h_list = self.h_list.clone();
        if let Some(a) = self.addr_a {
            view.addresses.insert("addr_a".into(), a);
        }
        if let Some(b) = self.addr_b {
            view.addresses.insert("addr_b".into(), b);
        }
    }
}
