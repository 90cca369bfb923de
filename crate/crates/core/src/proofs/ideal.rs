use std::collections::BTreeSet;
use std::sync::Mutex;

use hmac::{Hmac, Mac};
use sha2::Sha256;

use super::{holds, Proof, ProofError, Statement, WitnessData};
use crate::proofs::BackendTag;
use crate::ledger::Digest32;

const ATTEST_TAG: &[u8] = b"randlock/ideal/v1";

/// In-process ideal functionality.
///
/// Proving evaluates the relation with the witness and, on success, MACs the
/// statement digest under the session key. Verification recomputes the MAC,
/// so a verifier learns only whether some prover held a valid witness.
pub struct IdealBackend {
    key: [u8; 32],
    registry: Mutex<BTreeSet<Digest32>>,
}

impl std::fmt::Debug for IdealBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdealBackend").finish_non_exhaustive()
    }
}

impl IdealBackend {
    pub fn new(key: [u8; 32]) -> Self {
        IdealBackend { key, registry: Mutex::new(BTreeSet::new()) }
    }

    fn mac(&self, digest: &Digest32) -> Hmac<Sha256> {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.key).expect("hmac accepts any key length");
        mac.update(ATTEST_TAG);
        mac.update(&digest.0);
        mac
    }

    pub fn prove(&self, stmt: &Statement, wit: &WitnessData) -> Result<Proof, ProofError> {
        if !holds(stmt, wit) {
            return Err(ProofError::RelationUnsatisfied);
        }
        let digest = stmt.digest();
        let attestation = self.mac(&digest).finalize().into_bytes().to_vec();
        self.registry.lock().unwrap().insert(digest);
        Ok(Proof { backend: BackendTag::Ideal, statement_digest: digest, attestation })
    }

    pub fn verify(&self, stmt: &Statement, proof: &Proof) -> bool {
        let digest = stmt.digest();
        proof.backend == BackendTag::Ideal
            && proof.statement_digest == digest
            && self.mac(&digest).verify_slice(&proof.attestation).is_ok()
    }

    /// Whether this functionality instance issued a proof for `digest`.
    pub fn was_proven(&self, digest: &Digest32) -> bool {
        self.registry.lock().unwrap().contains(digest)
    }

    /// The session key, released for offline transcript audit.
    pub fn audit_key(&self) -> [u8; 32] {
        self.key
    }
}
