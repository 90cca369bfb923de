use crate::group::sha256_parts;
use crate::proofs::{BackendTag, Proof, Statement};

/// What a prover without a satisfying witness can send: a well-formed proof
/// for the right statement whose attestation it could not obtain.
pub fn forge_proof(stmt: &Statement) -> Proof {
    let digest = stmt.digest();
    Proof {
        backend: BackendTag::Ideal,
        statement_digest: digest,
        attestation: sha256_parts(&[b"forged", &digest.0]).to_vec(),
    }
}
