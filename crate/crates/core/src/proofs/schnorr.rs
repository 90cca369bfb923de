//! Non-interactive Schnorr proof of knowledge of a discrete log.
//!
//! `T = k·G`, `c = hash_p(tag ∥ statement ∥ T ∥ context)`, `z = k + c·sk`;
//! the verifier checks `z·G = T + c·P`.

use super::{BackendTag, Proof, ProofError, Statement};
use crate::group::{hash_p, GroupPoint, Scalar};

const CHALLENGE_TAG: &[u8] = b"randlock/dlog/v1";
const NONCE_TAG: &[u8] = b"randlock/dlog/nonce/v1";

fn challenge(stmt: &Statement, commitment: &GroupPoint, context: &[u8]) -> Scalar {
    hash_p(&[CHALLENGE_TAG, &stmt.encode(), &commitment.compress(), context].concat())
}

fn respond(sk: &Scalar, nonce: &Scalar, c: &Scalar) -> Scalar {
    *nonce + *c * *sk
}

fn encode(commitment: &GroupPoint, response: &Scalar) -> Vec<u8> {
    [commitment.compress().as_slice(), &response.to_bytes()].concat()
}

pub fn dlog_prove(sk: &Scalar, p: &GroupPoint, context: &[u8]) -> Result<Proof, ProofError> {
    if sk.is_zero() || sk.base_mul() != *p {
        return Err(ProofError::BadWitness);
    }
    let stmt = Statement::DLog { p: *p, context: context.to_vec() };
    let mut nonce = hash_p(&[NONCE_TAG, &sk.to_bytes(), &stmt.encode()].concat());
    if nonce.is_zero() {
        nonce = Scalar::ONE;
    }
    let commitment = nonce.base_mul();
    let c = challenge(&stmt, &commitment, context);
    Ok(Proof {
        backend: BackendTag::Schnorr,
        statement_digest: stmt.digest(),
        attestation: encode(&commitment, &respond(sk, &nonce, &c)),
    })
}

pub fn dlog_verify(p: &GroupPoint, proof: &Proof, context: &[u8]) -> bool {
    if proof.backend != BackendTag::Schnorr || proof.attestation.len() != 65 || p.is_identity() {
        return false;
    }
    let stmt = Statement::DLog { p: *p, context: context.to_vec() };
    if proof.statement_digest != stmt.digest() {
        return false;
    }
    let Ok(commitment) = GroupPoint::decompress(proof.attestation[..33].try_into().unwrap()) else {
        return false;
    };
    let Ok(response) = Scalar::from_bytes(proof.attestation[33..].try_into().unwrap()) else {
        return false;
    };
    let c = challenge(&stmt, &commitment, context);
    !commitment.is_identity() && response.base_mul() == commitment + *p * c
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// A transcript `(T, c, z)` with a caller-chosen nonce and challenge.
    pub fn transcript(sk: &Scalar, nonce: &Scalar, c: &Scalar) -> (GroupPoint, Scalar, Scalar) {
        (nonce.base_mul(), *c, respond(sk, nonce, c))
    }

    /// Special-soundness extractor: two accepting transcripts sharing `T`.
    pub fn extract(t1: (GroupPoint, Scalar, Scalar), t2: (GroupPoint, Scalar, Scalar)) -> Option<Scalar> {
        if t1.0 != t2.0 || t1.1 == t2.1 {
            return None;
        }
        Some((t1.2 - t2.2) * (t1.1 - t2.1).invert()?)
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::group::keygen;

    #[test]
    fn roundtrip_and_context_binding() {
        let kp = keygen(b"dlog");
        let proof = dlog_prove(&kp.secret(), &kp.public(), b"session-1").unwrap();
        assert!(dlog_verify(&kp.public(), &proof, b"session-1"));
        assert!(!dlog_verify(&kp.public(), &proof, b"session-2"));
        let doubled = kp.public() * Scalar::from_u64(2);
        assert!(!dlog_verify(&doubled, &proof, b"session-1"));
        assert_eq!(dlog_prove(&kp.secret(), &doubled, b"x"), Err(ProofError::BadWitness));
    }

    #[test]
    fn special_soundness_extracts_secret() {
        let kp = keygen(b"extract-me");
        let nonce = Scalar::from_u64(123456789);
        let a = transcript(&kp.secret(), &nonce, &hash_p(b"c1"));
        let b = transcript(&kp.secret(), &nonce, &hash_p(b"c2"));
        for t in [a, b] {
            assert_eq!(t.2.base_mul(), t.0 + kp.public() * t.1);
        }
        assert_eq!(extract(a, b), Some(kp.secret()));
    }
}
