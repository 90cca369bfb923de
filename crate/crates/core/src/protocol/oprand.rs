//! Interactive OP_RAND emulation between a Challenger, who hides one of `n`
//! commitments, and an Accepter, who guesses it.

use super::party::{Claim, Core, Fault, FlowLogic, PlayerView};
use super::{forge_proof, AbortCode, Cheat, ClaimOpening, Decision, DecisionKind, Message, Out};
use crate::commitments::{gen_commitment_set, win_check, CommitmentError, CommitmentSet};
use crate::group::{hash_p_point, keygen, GroupPoint, KeyPair, Scalar};
use crate::proofs::{dlog_prove, BackendTag, KeyBinding, KeyKnowledge, Statement, WitnessData};

pub fn protocol_key(party_seed: &[u8; 32]) -> KeyPair {
    keygen(&[&party_seed[..], b"oprand"].concat())
}

pub fn commitment_set(party_seed: &[u8; 32], n: usize) -> Result<CommitmentSet, CommitmentError> {
    gen_commitment_set(&[&party_seed[..], b"set"].concat(), n)
}

/// A point nobody in the session knows the discrete log of.
fn foreign_point(label: &str) -> GroupPoint {
    keygen(format!("randlock/foreign/{label}").as_bytes()).public()
}

pub(crate) struct Challenger {
    key: KeyPair,
    set: CommitmentSet,
    x: Option<usize>,
    r_c: Option<GroupPoint>,
    r_c_hash: Option<Scalar>,
    r_a_hash: Option<Scalar>,
}

impl Challenger {
    pub fn new(core: &Core) -> Result<Self, CommitmentError> {
        Ok(Challenger {
            key: protocol_key(&core.seed),
            set: commitment_set(&core.seed, core.cfg.n)?,
            x: None,
            r_c: None,
            r_c_hash: None,
            r_a_hash: None,
        })
    }
}

impl FlowLogic for Challenger {
    fn on_ready(&mut self, core: &mut Core) -> Result<Vec<Out>, Fault> {
        core.note("1-2. the Challenger generates a keypair and n random values a_i with A_i = a_i·G");
        core.phase = "hide";
        Ok(Vec::new())
    }

    fn pending(&self, core: &Core) -> Option<DecisionKind> {
        (core.phase == "hide").then_some(DecisionKind::Hide)
    }

    fn auto_decision(&self, core: &Core) -> Option<Decision> {
        Some(Decision::Choose(core.cfg.x.map(|x| x - 1).unwrap_or_else(|| core.seeded_index("choice"))))
    }

    fn decide(&mut self, core: &mut Core, d: Decision) -> Result<Vec<Out>, Fault> {
        let Decision::Choose(x) = d else { unreachable!("checked by the machine") };
        self.x = Some(x);
        let p_c = self.key.public();
        let a_x = if core.cheat(Cheat::ChallengerBadAddr) { foreign_point("challenger") } else { self.set.triples()[x].rank1 };
        let r_c = p_c + a_x;
        let r_c_hash = hash_p_point(&r_c);
        self.r_c = Some(r_c);
        self.r_c_hash = Some(r_c_hash);
        core.note("3. the Challenger assembles R_C = P_C + A_x and publishes hash(R_C)");
        let commit = core.out(3, Message::OpRandCommit { p_c, r_c_hash });

        let h_list = self.set.public().h_list;
        let stmt = Statement::Ra { h_list: h_list.clone(), p_a: p_c, binding: KeyBinding::Hash(r_c_hash) };
        let wit = WitnessData::Ra { secrets: self.set.secrets(), selected: x };
        let pi_a = core.proofs.prove(&stmt, &wit, BackendTag::Ideal).unwrap_or_else(|_| forge_proof(&stmt));
        core.note("4-6. the Challenger derives h_i = hash(A_i), H_i = h_i·G and offers H_1..H_n with π_a");
        let offer = core.out(6, Message::OpRandOffer { h_list, pi_a });
        core.phase = "await-proof";
        Ok(vec![commit, offer])
    }

    fn on_message(&mut self, core: &mut Core, msg: &Message) -> Result<Vec<Out>, Fault> {
        match (core.phase, msg) {
            ("await-proof", Message::OpRandAccept { r_a_hash }) => {
                self.r_a_hash = Some(*r_a_hash);
                Ok(Vec::new())
            }
            ("await-proof", Message::OpRandProof { pi_r }) => {
                let r_a_hash = self.r_a_hash.ok_or_else(|| Fault::unexpected(core.phase, msg))?;
                let stmt = Statement::Rr { binding: KeyBinding::Hash(r_a_hash), h_list: self.set.public().h_list };
                if !core.proofs.verify(&stmt, pi_r).unwrap_or(false) {
                    return Err(Fault::proof("pi_r", 9));
                }
                let x = self.x.unwrap();
                let r_c = if core.cheat(Cheat::ChallengerBadReveal) {
                    self.key.public() + self.set.triples()[(x + 1) % self.set.len()].rank1
                } else {
                    self.r_c.unwrap()
                };
                core.note("9. the Challenger verifies π_r and publishes R_C");
                core.phase = "await-claim";
                Ok(vec![core.out(9, Message::OpRandReveal { r_c })])
            }
            ("await-claim", Message::OpRandClaim { opening }) => {
                let x = self.x.unwrap();
                let won = match opening {
                    None => false,
                    Some(ClaimOpening { r_a, p_a }) => {
                        let opens = self.r_a_hash == Some(hash_p_point(r_a));
                        let matches = *r_a - *p_a == self.set.triples()[x].rank3;
                        if !(opens && matches) {
                            core.note("the Accepter's claim does not open to H_x");
                        }
                        opens && matches
                    }
                };
                core.verdict = Some(won);
                core.note(format!("11. the Accepter {}", if won { "won" } else { "lost" }));
                core.phase = "done";
                core.finished = true;
                Ok(Vec::new())
            }
            _ => Err(Fault::unexpected(core.phase, msg)),
        }
    }

    fn reclaimable(&self, _core: &Core) -> Vec<Claim> {
        Vec::new()
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
    }
}

pub(crate) struct Accepter {
    key: KeyPair,
    y: Option<usize>,
    p_c: Option<GroupPoint>,
    r_c_hash: Option<Scalar>,
    h_list: Vec<GroupPoint>,
    r_a: Option<GroupPoint>,
    p_a: Option<GroupPoint>,
}

impl Accepter {
    pub fn new(core: &Core) -> Self {
        Accepter { key: protocol_key(&core.seed), y: None, p_c: None, r_c_hash: None, h_list: Vec::new(), r_a: None, p_a: None }
    }
}

impl FlowLogic for Accepter {
    fn on_ready(&mut self, core: &mut Core) -> Result<Vec<Out>, Fault> {
        core.phase = "await-offer";
        Ok(Vec::new())
    }

    fn on_message(&mut self, core: &mut Core, msg: &Message) -> Result<Vec<Out>, Fault> {
        match (core.phase, msg) {
            ("await-offer", Message::OpRandCommit { p_c, r_c_hash }) => {
                self.p_c = Some(*p_c);
                self.r_c_hash = Some(*r_c_hash);
                Ok(Vec::new())
            }
            ("await-offer", Message::OpRandOffer { h_list, pi_a }) => {
                let (Some(p_c), Some(r_c_hash)) = (self.p_c, self.r_c_hash) else {
                    return Err(Fault::unexpected(core.phase, msg));
                };
                if h_list.len() != core.cfg.n {
                    return Err(Fault::new(AbortCode::BadMessage, format!("offer has {} commitments, expected {}", h_list.len(), core.cfg.n)));
                }
                let stmt = Statement::Ra { h_list: h_list.clone(), p_a: p_c, binding: KeyBinding::Hash(r_c_hash) };
                if !core.proofs.verify(&stmt, pi_a).unwrap_or(false) {
                    return Err(Fault::proof("pi_a", 7));
                }
                core.note("7. the Accepter verifies π_a");
                self.h_list = h_list.clone();
                core.phase = "guess";
                Ok(Vec::new())
            }
            ("await-reveal", Message::OpRandReveal { r_c }) => {
                if Some(hash_p_point(r_c)) != self.r_c_hash {
                    return Err(Fault::new(AbortCode::CommitmentMismatch, "R_C does not match the published hash"));
                }
                let a_x = *r_c - self.p_c.unwrap();
                let y = self.y.unwrap();
                let won = win_check(&a_x, &self.h_list[y]).unwrap_or(false);
                core.note("10. the Accepter recovers A_x = R_C - P_C");
                core.note(format!("11. hash(A_x)·G {} H_y: the Accepter {}", if won { "=" } else { "≠" }, if won { "won" } else { "lost" }));
                core.verdict = Some(won);
                let opening = won.then(|| ClaimOpening { r_a: self.r_a.unwrap(), p_a: self.p_a.unwrap() });
                core.phase = "done";
                core.finished = true;
                Ok(vec![core.out(11, Message::OpRandClaim { opening })])
            }
            _ => Err(Fault::unexpected(core.phase, msg)),
        }
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
        let no_key = core.cheat(Cheat::AccepterNoKey);
        let p_a = if no_key { foreign_point("accepter") } else { self.key.public() };
        let mut r_a = p_a + self.h_list[y];
        if core.cheat(Cheat::AccepterBadAddr) {
            r_a = r_a + GroupPoint::GENERATOR;
        }
        let r_a_hash = hash_p_point(&r_a);
        self.r_a = Some(r_a);
        self.p_a = Some(p_a);
        let binding = KeyBinding::Hash(r_a_hash);
        let stmt = Statement::Rr { binding, h_list: self.h_list.clone() };
        let pok = dlog_prove(&self.key.secret(), &p_a, &binding.message());
        let pi_r = match pok {
            Ok(pok) => {
                let wit = WitnessData::Rr { p_b: p_a, knowledge: KeyKnowledge::DLog(pok), selected: y };
                core.proofs.prove(&stmt, &wit, BackendTag::Ideal).unwrap_or_else(|_| forge_proof(&stmt))
            }
            Err(_) => forge_proof(&stmt),
        };
        core.note("7. the Accepter picks H_y, assembles R_A = P_A + H_y and publishes hash(R_A)");
        core.note("8. the Accepter sends π_r, which covers knowledge of the discrete log of P_A");
        let accept = core.out(7, Message::OpRandAccept { r_a_hash });
        let proof = core.out(8, Message::OpRandProof { pi_r });
        core.phase = "await-reveal";
        Ok(vec![accept, proof])
    }

    fn reclaimable(&self, _core: &Core) -> Vec<Claim> {
        Vec::new()
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
    }
}
