//! Rank-1/2/3 commitments and key assembly.
//!
//! For a secret `a`: rank 1 is `A = a·G`, rank 2 is `h = hash_p(A)`, rank 3 is
//! `H = h·G`. Publishing `H` hides `A`; revealing `A` later hands the holder
//! of `H` the discrete log `h`, which is what lets a commitment opening
//! transfer spending power over an assembled key `P + H`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{hash_p, hash_p_point, GroupError, GroupPoint, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitmentError {
    #[error("a commitment set needs at least two entries, got {0}")]
    TooFew(usize),
    #[error("commitment chain rejects the identity point")]
    IdentityPoint,
    #[error("assembled key is the identity")]
    DegenerateSum,
    #[error("derived spending key is zero")]
    ZeroKey,
}

impl From<GroupError> for CommitmentError {
    fn from(e: GroupError) -> Self {
        match e {
            GroupError::ZeroKey => CommitmentError::ZeroKey,
            _ => CommitmentError::IdentityPoint,
        }
    }
}

/// `(a, A, h, H)` with `A = a·G`, `h = hash_p(A)`, `H = h·G`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CommitmentTriple {
    pub secret: Scalar,
    pub rank1: GroupPoint,
    pub rank2: Scalar,
    pub rank3: GroupPoint,
}

impl CommitmentTriple {
    pub fn from_secret(secret: Scalar) -> Result<Self, CommitmentError> {
        let rank1 = secret.base_mul();
        let rank2 = rank2(&rank1)?;
        Ok(CommitmentTriple { secret, rank1, rank2, rank3: rank3(&rank2) })
    }

    pub fn is_consistent(&self) -> bool {
        self.secret.base_mul() == self.rank1
            && rank2(&self.rank1).map(|h| h == self.rank2).unwrap_or(false)
            && self.rank2.base_mul() == self.rank3
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CommitmentSet {
    triples: Vec<CommitmentTriple>,
}

impl CommitmentSet {
    /// Rebuilds a set from raw secrets, checking the shape invariants.
    pub fn from_secrets(secrets: &[Scalar]) -> Result<Self, CommitmentError> {
        if secrets.len() < 2 {
            return Err(CommitmentError::TooFew(secrets.len()));
        }
        let triples = secrets.iter().map(|s| CommitmentTriple::from_secret(*s)).collect::<Result<Vec<_>, _>>()?;
        Ok(CommitmentSet { triples })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[CommitmentTriple] {
        &self.triples
    }

    pub fn get(&self, index: usize) -> Option<&CommitmentTriple> {
        self.triples.get(index)
    }

    pub fn secrets(&self) -> Vec<Scalar> {
        self.triples.iter().map(|t| t.secret).collect()
    }

    /// The public part: third-rank commitments in order.
    pub fn public(&self) -> PublicCommitments {
        PublicCommitments { h_list: self.triples.iter().map(|t| t.rank3).collect() }
    }
}

/// Wire form of a commitment set: only the `H_i`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PublicCommitments {
    pub h_list: Vec<GroupPoint>,
}

/// `R = base + addend`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AssembledKey {
    pub key: GroupPoint,
    pub base: GroupPoint,
    pub addend: GroupPoint,
}

/// Derives `n` commitment triples from `seed`. Secret `i` is
/// `hash_p(seed ∥ "commit" ∥ i ∥ counter)`, bumping the counter on a zero
/// secret or a repeated `A_i`.
pub fn gen_commitment_set(seed: &[u8], n: usize) -> Result<CommitmentSet, CommitmentError> {
    if n < 2 {
        return Err(CommitmentError::TooFew(n));
    }
    let mut triples: Vec<CommitmentTriple> = Vec::with_capacity(n);
    for i in 0..n as u32 {
        let mut counter: u32 = 0;
        loop {
            let secret = hash_p(&[seed, b"commit", &i.to_be_bytes(), &counter.to_be_bytes()].concat());
            counter += 1;
            if secret.is_zero() {
                continue;
            }
            let triple = CommitmentTriple::from_secret(secret)?;
            if triples.iter().any(|t| t.rank1 == triple.rank1) {
                continue;
            }
            triples.push(triple);
            break;
        }
    }
    Ok(CommitmentSet { triples })
}

pub fn rank2(rank1: &GroupPoint) -> Result<Scalar, CommitmentError> {
    if rank1.is_identity() {
        return Err(CommitmentError::IdentityPoint);
    }
    Ok(hash_p_point(rank1))
}

pub fn rank3(rank2: &Scalar) -> GroupPoint {
    rank2.base_mul()
}

pub fn assemble(base: &GroupPoint, addend: &GroupPoint) -> Result<AssembledKey, CommitmentError> {
    if base.is_identity() || addend.is_identity() {
        return Err(CommitmentError::IdentityPoint);
    }
    let key = *base + *addend;
    if key.is_identity() {
        return Err(CommitmentError::DegenerateSum);
    }
    Ok(AssembledKey { key, base: *base, addend: *addend })
}

/// `R − base`: recovers the addend once an assembled key is published.
pub fn recover(assembled: &GroupPoint, base: &GroupPoint) -> GroupPoint {
    *assembled - *base
}

/// `hash_p(A_x)·G == H_y`.
pub fn win_check(revealed: &GroupPoint, guess: &GroupPoint) -> Result<bool, CommitmentError> {
    Ok(rank3(&rank2(revealed)?) == *guess)
}

/// `h + sk`: the secret key of `sk·G + h·G`.
pub fn derive_spend_key(h: &Scalar, sk: &Scalar) -> Result<Scalar, CommitmentError> {
    let k = *h + *sk;
    if k.is_zero() {
        return Err(CommitmentError::ZeroKey);
    }
    Ok(k)
}
