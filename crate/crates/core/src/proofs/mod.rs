//! Relations, their direct predicates, and proof backends.
//!
//! Each relation pairs a public [`Statement`] with a secret [`WitnessData`].
//! The `holds_*` predicates evaluate the relation directly. A [`Proof`] is
//! produced by a backend:
//!
//! * `ideal` checks the predicate with the witness at proving time and issues
//!   a MAC attestation under a per-session key the parties never hold. The
//!   verifier learns one bit.
//! * `schnorr` is a Fiat–Shamir proof of knowledge of a discrete log and
//!   only serves [`Statement::DLog`].
//!
//! Witness types deliberately have no serialization.

mod ideal;
mod schnorr;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::commitments::{rank2, rank3};
use crate::group::{hash_160, hash_p, hash_p_point, sha256_parts, sig_ver, Address, GroupPoint, Scalar, Signature};
use crate::ledger::Digest32;
use crate::statetrace::{build_tree, state_preimage, TransitionFn};

pub use ideal::IdealBackend;
pub use schnorr::{dlog_prove, dlog_verify};

const STATEMENT_TAG: &[u8] = b"randlock/statement/v1";
const PROOF_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProofError {
    #[error("witness does not satisfy the relation")]
    RelationUnsatisfied,
    #[error("unknown proof backend {0}")]
    UnknownBackend(u8),
    #[error("backend {backend} cannot handle {relation} statements")]
    Unsupported { backend: BackendTag, relation: &'static str },
    #[error("bad witness for discrete log statement")]
    BadWitness,
    #[error("malformed proof encoding: {0}")]
    Encoding(String),
}

/// How a party's assembled key is published: as an address (the game flow)
/// or as a plain hash commitment `hash_p(R)` (the standalone randomness flow).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum KeyBinding {
    Address(Address),
    Hash(Scalar),
}

impl KeyBinding {
    pub fn matches(&self, key: &GroupPoint) -> bool {
        match self {
            KeyBinding::Address(a) => hash_160(key).map(|k| k == *a).unwrap_or(false),
            KeyBinding::Hash(h) => !key.is_identity() && hash_p_point(key) == *h,
        }
    }

    /// Bytes a knowledge proof over this binding signs.
    pub fn message(&self) -> Vec<u8> {
        match self {
            KeyBinding::Address(a) => a.0.to_vec(),
            KeyBinding::Hash(h) => h.to_bytes().to_vec(),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            KeyBinding::Address(a) => {
                out.push(0x00);
                out.extend_from_slice(&a.0);
            }
            KeyBinding::Hash(h) => {
                out.push(0x01);
                out.extend_from_slice(&h.to_bytes());
            }
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "relation", rename_all = "snake_case")]
pub enum Statement {
    /// `hash_160(P_a) = addr_a ∧ hash_p(P_a)·G = C`.
    Rc { addr_a: Address, c: GroupPoint },
    /// Every `H_i` is a correct rank-3 commitment and `P_a + A_x` opens `binding`.
    Ra { h_list: Vec<GroupPoint>, p_a: GroupPoint, binding: KeyBinding },
    /// The prover knows the key `P_b` and `P_b + H_y` opens `binding` for some y.
    Rr { binding: KeyBinding, h_list: Vec<GroupPoint> },
    /// A commitment tree over a hidden state was built correctly.
    Trace {
        p_a: GroupPoint,
        fns: Vec<TransitionFn>,
        depth: u32,
        addresses: Vec<Address>,
        state_lock: Option<Scalar>,
    },
    DLog {
        p: GroupPoint,
        #[serde(with = "crate::ledger::hex_bytes")]
        context: Vec<u8>,
    },
}

impl Statement {
    pub fn relation_name(&self) -> &'static str {
        match self {
            Statement::Rc { .. } => "rc",
            Statement::Ra { .. } => "ra",
            Statement::Rr { .. } => "rr",
            Statement::Trace { .. } => "trace",
            Statement::DLog { .. } => "dlog",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let push_points = |out: &mut Vec<u8>, points: &[GroupPoint]| {
            out.extend_from_slice(&(points.len() as u32).to_be_bytes());
            for p in points {
                out.extend_from_slice(&p.compress());
            }
        };
        match self {
            Statement::Rc { addr_a, c } => {
                out.push(0x01);
                out.extend_from_slice(&addr_a.0);
                out.extend_from_slice(&c.compress());
            }
            Statement::Ra { h_list, p_a, binding } => {
                out.push(0x02);
                push_points(&mut out, h_list);
                out.extend_from_slice(&p_a.compress());
                binding.encode(&mut out);
            }
            Statement::Rr { binding, h_list } => {
                out.push(0x03);
                binding.encode(&mut out);
                push_points(&mut out, h_list);
            }
            Statement::Trace { p_a, fns, depth, addresses, state_lock } => {
                out.push(0x04);
                out.extend_from_slice(&p_a.compress());
                out.extend_from_slice(&depth.to_be_bytes());
                out.extend_from_slice(&(fns.len() as u32).to_be_bytes());
                for f in fns {
                    out.extend_from_slice(&f.mul.to_bytes());
                    out.extend_from_slice(&f.add.to_bytes());
                }
                match state_lock {
                    Some(h) => {
                        out.push(1);
                        out.extend_from_slice(&h.to_bytes());
                    }
                    None => out.push(0),
                }
                out.extend_from_slice(&(addresses.len() as u32).to_be_bytes());
                for a in addresses {
                    out.extend_from_slice(&a.0);
                }
            }
            Statement::DLog { p, context } => {
                out.push(0x05);
                out.extend_from_slice(&p.compress());
                out.extend_from_slice(&(context.len() as u32).to_be_bytes());
                out.extend_from_slice(context);
            }
        }
        out
    }

    pub fn digest(&self) -> Digest32 {
        Digest32(sha256_parts(&[STATEMENT_TAG, &self.encode()]))
    }
}

/// Either a signature over the binding message or a discrete-log proof with
/// the binding message as context. Both show knowledge of the key's secret.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum KeyKnowledge {
    Signature(Signature),
    DLog(Proof),
}

#[derive(Clone, PartialEq, Eq)]
pub enum WitnessData {
    Rc { p_a: GroupPoint },
    /// `selected` is 0-based.
    Ra { secrets: Vec<Scalar>, selected: usize },
    Rr { p_b: GroupPoint, knowledge: KeyKnowledge, selected: usize },
    Trace { state: Scalar },
    DLog { sk: Scalar },
}

impl fmt::Debug for WitnessData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            WitnessData::Rc { .. } => "Rc",
            WitnessData::Ra { .. } => "Ra",
            WitnessData::Rr { .. } => "Rr",
            WitnessData::Trace { .. } => "Trace",
            WitnessData::DLog { .. } => "DLog",
        };
        write!(f, "WitnessData::{name}(<redacted>)")
    }
}

pub fn holds_rc(stmt: &Statement, wit: &WitnessData) -> bool {
    let (Statement::Rc { addr_a, c }, WitnessData::Rc { p_a }) = (stmt, wit) else {
        return false;
    };
    hash_160(p_a).map(|a| a == *addr_a).unwrap_or(false) && hash_p_point(p_a).base_mul() == *c
}

pub fn holds_ra(stmt: &Statement, wit: &WitnessData) -> bool {
    let (Statement::Ra { h_list, p_a, binding }, WitnessData::Ra { secrets, selected }) = (stmt, wit) else {
        return false;
    };
    if h_list.len() < 2 || secrets.len() != h_list.len() || *selected >= h_list.len() {
        return false;
    }
    let mut rank1 = Vec::with_capacity(secrets.len());
    for (a, big_h) in secrets.iter().zip(h_list) {
        let a_point = a.base_mul();
        let Ok(h) = rank2(&a_point) else {
            return false;
        };
        if rank3(&h) != *big_h {
            return false;
        }
        rank1.push(a_point);
    }
    let key = *p_a + rank1[*selected];
    !p_a.is_identity() && binding.matches(&key)
}

pub fn holds_rr(stmt: &Statement, wit: &WitnessData) -> bool {
    let (Statement::Rr { binding, h_list }, WitnessData::Rr { p_b, knowledge, selected }) = (stmt, wit) else {
        return false;
    };
    if h_list.len() < 2 || *selected >= h_list.len() || p_b.is_identity() {
        return false;
    }
    let message = binding.message();
    let knows_key = match knowledge {
        KeyKnowledge::Signature(sig) => sig_ver(p_b, &message, sig),
        KeyKnowledge::DLog(proof) => dlog_verify(p_b, proof, &message),
    };
    knows_key && binding.matches(&(*p_b + h_list[*selected]))
}

pub fn holds_trace(stmt: &Statement, wit: &WitnessData) -> bool {
    let (Statement::Trace { p_a, fns, depth, addresses, state_lock }, WitnessData::Trace { state }) = (stmt, wit) else {
        return false;
    };
    let Ok(tree) = build_tree(*p_a, *state, fns.clone(), *depth) else {
        return false;
    };
    let lock_ok = match state_lock {
        Some(h) => hash_p(&state_preimage(state)) == *h,
        None => true,
    };
    lock_ok && tree.addresses() == *addresses
}

pub fn holds_dlog(stmt: &Statement, wit: &WitnessData) -> bool {
    match (stmt, wit) {
        (Statement::DLog { p, .. }, WitnessData::DLog { sk }) => !sk.is_zero() && sk.base_mul() == *p,
        _ => false,
    }
}

/// Dispatches to the predicate for the statement's relation.
pub fn holds(stmt: &Statement, wit: &WitnessData) -> bool {
    match stmt {
        Statement::Rc { .. } => holds_rc(stmt, wit),
        Statement::Ra { .. } => holds_ra(stmt, wit),
        Statement::Rr { .. } => holds_rr(stmt, wit),
        Statement::Trace { .. } => holds_trace(stmt, wit),
        Statement::DLog { .. } => holds_dlog(stmt, wit),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendTag {
    Ideal,
    Schnorr,
}

impl BackendTag {
    fn code(self) -> u8 {
        match self {
            BackendTag::Ideal => 1,
            BackendTag::Schnorr => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, ProofError> {
        match code {
            1 => Ok(BackendTag::Ideal),
            2 => Ok(BackendTag::Schnorr),
            other => Err(ProofError::UnknownBackend(other)),
        }
    }
}

impl fmt::Display for BackendTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendTag::Ideal => "ideal",
            BackendTag::Schnorr => "schnorr",
        })
    }
}

impl std::str::FromStr for BackendTag {
    type Err = ProofError;

    fn from_str(s: &str) -> Result<Self, ProofError> {
        match s {
            "ideal" => Ok(BackendTag::Ideal),
            "schnorr" => Ok(BackendTag::Schnorr),
            _ => Err(ProofError::UnknownBackend(0)),
        }
    }
}

/// An attestation bound to one statement digest.
///
/// Wire form: `version ∥ backend ∥ digest(32) ∥ len(u16) ∥ attestation`, hex
/// encoded.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Proof {
    pub backend: BackendTag,
    pub statement_digest: Digest32,
    pub attestation: Vec<u8>,
}

impl Proof {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.attestation.len());
        out.push(PROOF_VERSION);
        out.push(self.backend.code());
        out.extend_from_slice(&self.statement_digest.0);
        out.extend_from_slice(&(self.attestation.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.attestation);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProofError> {
        if bytes.len() < 36 {
            return Err(ProofError::Encoding("truncated proof".into()));
        }
        if bytes[0] != PROOF_VERSION {
            return Err(ProofError::Encoding(format!("unsupported proof version {}", bytes[0])));
        }
        let backend = BackendTag::from_code(bytes[1])?;
        let digest = Digest32(bytes[2..34].try_into().unwrap());
        let len = u16::from_be_bytes([bytes[34], bytes[35]]) as usize;
        if bytes.len() != 36 + len {
            return Err(ProofError::Encoding("attestation length mismatch".into()));
        }
        Ok(Proof { backend, statement_digest: digest, attestation: bytes[36..].to_vec() })
    }
}

impl Serialize for Proof {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for Proof {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bytes = hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)?;
        Proof::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// Both backends behind one prove/verify surface.
#[derive(Debug)]
pub struct ProofSystem {
    ideal: IdealBackend,
}

impl ProofSystem {
    pub fn new(ideal_key: [u8; 32]) -> Self {
        ProofSystem { ideal: IdealBackend::new(ideal_key) }
    }

    pub fn ideal(&self) -> &IdealBackend {
        &self.ideal
    }

    pub fn prove(&self, stmt: &Statement, wit: &WitnessData, backend: BackendTag) -> Result<Proof, ProofError> {
        match backend {
            BackendTag::Ideal => self.ideal.prove(stmt, wit),
            BackendTag::Schnorr => match (stmt, wit) {
                (Statement::DLog { p, context }, WitnessData::DLog { sk }) => dlog_prove(sk, p, context),
                (Statement::DLog { .. }, _) => Err(ProofError::RelationUnsatisfied),
                _ => Err(ProofError::Unsupported { backend, relation: stmt.relation_name() }),
            },
        }
    }

    pub fn verify(&self, stmt: &Statement, proof: &Proof) -> Result<bool, ProofError> {
        match proof.backend {
            BackendTag::Ideal => Ok(self.ideal.verify(stmt, proof)),
            BackendTag::Schnorr => match stmt {
                Statement::DLog { p, context } => Ok(dlog_verify(p, proof, context)),
                _ => Err(ProofError::Unsupported { backend: proof.backend, relation: stmt.relation_name() }),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commitments::{assemble, gen_commitment_set};
    use crate::group::{keygen, sig_gen};

    fn alice_setup(n: usize, x: usize) -> (Statement, WitnessData, Vec<Scalar>) {
        let set = gen_commitment_set(b"alice-commit", n).unwrap();
        let p_a = keygen(b"alice").public();
        let addr = hash_160(&assemble(&p_a, &set.triples()[x].rank1).unwrap().key).unwrap();
        let stmt = Statement::Ra { h_list: set.public().h_list, p_a, binding: KeyBinding::Address(addr) };
        (stmt, WitnessData::Ra { secrets: set.secrets(), selected: x }, set.secrets())
    }

    #[test]
    fn rc_honest_and_tampered() {
        let alice = keygen(b"alice");
        let c = hash_p_point(&alice.public()).base_mul();
        let stmt = Statement::Rc { addr_a: alice.address(), c };
        assert!(holds_rc(&stmt, &WitnessData::Rc { p_a: alice.public() }));
        let bad_c = Statement::Rc { addr_a: alice.address(), c: c + GroupPoint::GENERATOR };
        assert!(!holds_rc(&bad_c, &WitnessData::Rc { p_a: alice.public() }));
        assert!(!holds_rc(&stmt, &WitnessData::Rc { p_a: keygen(b"mallory").public() }));
    }

    #[test]
    fn ra_selector_binding() {
        let (stmt, _, secrets) = alice_setup(2, 0);
        assert!(holds_ra(&stmt, &WitnessData::Ra { secrets: secrets.clone(), selected: 0 }));
        assert!(!holds_ra(&stmt, &WitnessData::Ra { secrets: secrets.clone(), selected: 1 }));
        let Statement::Ra { mut h_list, p_a, binding } = stmt else { unreachable!() };
        h_list[1] = h_list[1] + GroupPoint::GENERATOR;
        assert!(!holds_ra(&Statement::Ra { h_list, p_a, binding }, &WitnessData::Ra { secrets, selected: 0 }));
    }

    #[test]
    fn ra_exactly_one_selector_for_n4() {
        for x in 0..4 {
            let (stmt, _, secrets) = alice_setup(4, x);
            let satisfying: Vec<usize> =
                (0..4).filter(|&i| holds_ra(&stmt, &WitnessData::Ra { secrets: secrets.clone(), selected: i })).collect();
            assert_eq!(satisfying, vec![x]);
        }
    }

    #[test]
    fn rr_checks() {
        let set = gen_commitment_set(b"c", 2).unwrap();
        let h_list = set.public().h_list;
        let bob = keygen(b"bob");
        let addr_b = hash_160(&(bob.public() + h_list[0])).unwrap();
        let binding = KeyBinding::Address(addr_b);
        let sig = sig_gen(&bob.secret(), &binding.message()).unwrap();
        let stmt = Statement::Rr { binding, h_list: h_list.clone() };
        let wit = |knowledge, selected| WitnessData::Rr { p_b: bob.public(), knowledge, selected };
        assert!(holds_rr(&stmt, &wit(KeyKnowledge::Signature(sig), 0)));
        assert!(!holds_rr(&stmt, &wit(KeyKnowledge::Signature(sig), 1)));
        let forged = Signature { r: sig.r, s: sig.s + Scalar::ONE };
        assert!(!holds_rr(&stmt, &wit(KeyKnowledge::Signature(forged), 0)));
        // addr_b over the bare key, not P_b + H_y.
        let plain = Statement::Rr { binding: KeyBinding::Address(bob.address()), h_list };
        let sig2 = sig_gen(&bob.secret(), &KeyBinding::Address(bob.address()).message()).unwrap();
        assert!((0..2).all(|y| !holds_rr(&plain, &wit(KeyKnowledge::Signature(sig2), y))));
    }

    #[test]
    fn ideal_roundtrip_and_statement_binding() {
        let sys = ProofSystem::new([7; 32]);
        let (stmt, wit, _) = alice_setup(2, 1);
        let proof = sys.prove(&stmt, &wit, BackendTag::Ideal).unwrap();
        assert!(sys.verify(&stmt, &proof).unwrap());
        let Statement::Ra { mut h_list, p_a, binding } = stmt.clone() else { unreachable!() };
        h_list[0] = h_list[0] + GroupPoint::GENERATOR;
        assert!(!sys.verify(&Statement::Ra { h_list, p_a, binding }, &proof).unwrap());
        // Another session's functionality does not accept it.
        assert!(!ProofSystem::new([8; 32]).verify(&stmt, &proof).unwrap());
        let back = Proof::from_bytes(&proof.to_bytes()).unwrap();
        assert_eq!(back, proof);
    }

    #[test]
    fn cheating_alice_cannot_get_a_verifying_proof() {
        let sys = ProofSystem::new([1; 32]);
        let set = gen_commitment_set(b"alice-commit", 3).unwrap();
        let p_a = keygen(b"alice").public();
        // addr built from A_3, which is not part of the offered pair.
        let addr = hash_160(&(p_a + set.triples()[2].rank1)).unwrap();
        let h_list = set.public().h_list[..2].to_vec();
        let stmt = Statement::Ra { h_list, p_a, binding: KeyBinding::Address(addr) };
        let secrets = set.secrets()[..2].to_vec();
        for x in 0..2 {
            let wit = WitnessData::Ra { secrets: secrets.clone(), selected: x };
            assert_eq!(sys.prove(&stmt, &wit, BackendTag::Ideal), Err(ProofError::RelationUnsatisfied));
        }
        let forged = Proof { backend: BackendTag::Ideal, statement_digest: stmt.digest(), attestation: vec![0xaa; 32] };
        assert!(!sys.verify(&stmt, &forged).unwrap());
    }

    #[test]
    fn schnorr_backend_only_serves_dlog() {
        let sys = ProofSystem::new([0; 32]);
        let (stmt, wit, _) = alice_setup(2, 0);
        assert!(matches!(sys.prove(&stmt, &wit, BackendTag::Schnorr), Err(ProofError::Unsupported { .. })));
        let kp = keygen(b"k");
        let d = Statement::DLog { p: kp.public(), context: b"ctx".to_vec() };
        let proof = sys.prove(&d, &WitnessData::DLog { sk: kp.secret() }, BackendTag::Schnorr).unwrap();
        assert!(sys.verify(&d, &proof).unwrap());
        let mut bytes = proof.to_bytes();
        bytes[1] = 9;
        assert_eq!(Proof::from_bytes(&bytes), Err(ProofError::UnknownBackend(9)));
    }

    #[test]
    fn witness_debug_redacts() {
        let w = WitnessData::DLog { sk: Scalar::from_u64(42) };
        assert_eq!(format!("{w:?}"), "WitnessData::DLog(<redacted>)");
    }

    #[test]
    fn statement_digest_covers_every_field() {
        let (stmt, _, _) = alice_setup(2, 0);
        let Statement::Ra { h_list, p_a, binding } = stmt.clone() else { unreachable!() };
        let variants = vec![
            Statement::Ra { h_list: vec![h_list[1], h_list[0]], p_a, binding },
            Statement::Ra { h_list: h_list.clone(), p_a: p_a + GroupPoint::GENERATOR, binding },
            Statement::Ra { h_list: h_list.clone(), p_a, binding: KeyBinding::Address(Address([0; 20])) },
            Statement::Rr { binding, h_list },
        ];
        for v in variants {
            assert_ne!(v.digest(), stmt.digest());
        }
    }
}
