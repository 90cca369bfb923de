//! secp256k1 group arithmetic, hash-to-scalar, address hashing and Schnorr
//! signatures.
//!
//! Every other module works in terms of [`Scalar`] and [`GroupPoint`]; the
//! underlying curve implementation is an internal detail. Points hash and
//! serialize through their 33-byte compressed encoding, with the identity
//! encoded as 33 zero bytes.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use k256::elliptic_curve::group::GroupEncoding;
use k256::elliptic_curve::ops::{MulByGenerator, Reduce};
use k256::elliptic_curve::PrimeField;
use k256::{AffinePoint, FieldBytes, ProjectivePoint, U256};
use ripemd::Ripemd160;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroupError {
    #[error("the identity point has no address or hash commitment")]
    IdentityPoint,
    #[error("secret key is zero")]
    ZeroKey,
    #[error("invalid encoding: {0}")]
    InvalidEncoding(String),
}

/// Element of the scalar field of secp256k1 (integers modulo the group order).
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Scalar(k256::Scalar);

impl Scalar {
    pub const ZERO: Scalar = Scalar(k256::Scalar::ZERO);
    pub const ONE: Scalar = Scalar(k256::Scalar::ONE);

    pub fn from_u64(v: u64) -> Self {
        Scalar(k256::Scalar::from(v))
    }

    /// Reduces an arbitrary 32-byte big-endian integer modulo the group order.
    pub fn reduce(bytes: &[u8; 32]) -> Self {
        let fb = FieldBytes::from(*bytes);
        Scalar(<k256::Scalar as Reduce<U256>>::reduce_bytes(&fb))
    }

    /// Parses a canonical (already reduced) 32-byte big-endian encoding.
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, GroupError> {
        Option::from(k256::Scalar::from_repr(FieldBytes::from(*bytes)))
            .map(Scalar)
            .ok_or_else(|| GroupError::InvalidEncoding("scalar is not reduced".into()))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_repr().into()
    }

    pub fn is_zero(&self) -> bool {
        bool::from(self.0.is_zero())
    }

    pub fn invert(&self) -> Option<Scalar> {
        Option::from(self.0.invert()).map(Scalar)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, GroupError> {
        Self::from_bytes(&decode_fixed::<32>(s)?)
    }

    /// `self · G`.
    pub fn base_mul(&self) -> GroupPoint {
        GroupPoint(ProjectivePoint::mul_by_generator(&self.0))
    }
}

impl Add for Scalar {
    type Output = Scalar;
    fn add(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 + rhs.0)
    }
}

impl Sub for Scalar {
    type Output = Scalar;
    fn sub(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 - rhs.0)
    }
}

impl Mul for Scalar {
    type Output = Scalar;
    fn mul(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 * rhs.0)
    }
}

impl Neg for Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        Scalar(-self.0)
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scalar({})", self.to_hex())
    }
}

/// Element of the secp256k1 group, identity included.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupPoint(ProjectivePoint);

impl GroupPoint {
    pub const IDENTITY: GroupPoint = GroupPoint(ProjectivePoint::IDENTITY);
    pub const GENERATOR: GroupPoint = GroupPoint(ProjectivePoint::GENERATOR);

    pub fn is_identity(&self) -> bool {
        self.0 == ProjectivePoint::IDENTITY
    }

    /// 33-byte SEC1 compressed encoding; the identity is all zeros.
    pub fn compress(&self) -> [u8; 33] {
        if self.is_identity() {
            return [0u8; 33];
        }
        self.0.to_affine().to_bytes().into()
    }

    pub fn decompress(bytes: &[u8; 33]) -> Result<Self, GroupError> {
        if bytes.iter().all(|b| *b == 0) {
            return Ok(Self::IDENTITY);
        }
        if bytes[0] != 0x02 && bytes[0] != 0x03 {
            return Err(GroupError::InvalidEncoding("bad compressed point tag".into()));
        }
        let enc = k256::CompressedPoint::from(*bytes);
        Option::<AffinePoint>::from(AffinePoint::from_bytes(&enc))
            .map(|p| GroupPoint(p.into()))
            .ok_or_else(|| GroupError::InvalidEncoding("point is not on the curve".into()))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.compress())
    }

    pub fn from_hex(s: &str) -> Result<Self, GroupError> {
        Self::decompress(&decode_fixed::<33>(s)?)
    }
}

impl Add for GroupPoint {
    type Output = GroupPoint;
    fn add(self, rhs: GroupPoint) -> GroupPoint {
        GroupPoint(self.0 + rhs.0)
    }
}

impl Sub for GroupPoint {
    type Output = GroupPoint;
    fn sub(self, rhs: GroupPoint) -> GroupPoint {
        GroupPoint(self.0 - rhs.0)
    }
}

impl Neg for GroupPoint {
    type Output = GroupPoint;
    fn neg(self) -> GroupPoint {
        GroupPoint(-self.0)
    }
}

impl Mul<Scalar> for GroupPoint {
    type Output = GroupPoint;
    fn mul(self, rhs: Scalar) -> GroupPoint {
        GroupPoint(self.0 * rhs.0)
    }
}

impl fmt::Debug for GroupPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupPoint({})", self.to_hex())
    }
}

/// RIPEMD160(SHA256(compressed point)).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; 20]);

impl Address {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, GroupError> {
        Ok(Address(decode_fixed::<20>(s)?))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", self.to_hex())
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct KeyPair {
    sk: Scalar,
    pk: GroupPoint,
}

impl KeyPair {
    pub fn from_secret(sk: Scalar) -> Result<Self, GroupError> {
        if sk.is_zero() {
            return Err(GroupError::ZeroKey);
        }
        Ok(KeyPair { sk, pk: sk.base_mul() })
    }

    pub fn secret(&self) -> Scalar {
        self.sk
    }

    pub fn public(&self) -> GroupPoint {
        self.pk
    }

    pub fn address(&self) -> Address {
        // pk = sk·G with sk ≠ 0 is never the identity.
        hash_160(&self.pk).expect("nonzero key")
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("pk", &self.pk).finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Signature {
    pub r: GroupPoint,
    pub s: Scalar,
}

impl Signature {
    pub fn to_bytes(&self) -> [u8; 65] {
        let mut out = [0u8; 65];
        out[..33].copy_from_slice(&self.r.compress());
        out[33..].copy_from_slice(&self.s.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GroupError> {
        if bytes.len() != 65 {
            return Err(GroupError::InvalidEncoding(format!(
                "signature must be 65 bytes, got {}",
                bytes.len()
            )));
        }
        let r = GroupPoint::decompress(bytes[..33].try_into().unwrap())?;
        let s = Scalar::from_bytes(bytes[33..].try_into().unwrap())?;
        Ok(Signature { r, s })
    }
}

pub fn sha256(message: &[u8]) -> [u8; 32] {
    Sha256::digest(message).into()
}

/// SHA256 of the concatenation of `parts`.
pub fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// SHA256(message) read big-endian and reduced modulo the group order.
pub fn hash_p(message: &[u8]) -> Scalar {
    Scalar::reduce(&sha256(message))
}

/// `hash_p` of the compressed encoding of a point.
pub fn hash_p_point(point: &GroupPoint) -> Scalar {
    hash_p(&point.compress())
}

pub fn hash_160(point: &GroupPoint) -> Result<Address, GroupError> {
    if point.is_identity() {
        return Err(GroupError::IdentityPoint);
    }
    let inner = sha256(&point.compress());
    Ok(Address(Ripemd160::digest(inner).into()))
}

/// Deterministic key derivation: `sk = hash_p(seed ∥ counter)` with the
/// 4-byte big-endian counter bumped until `sk ≠ 0`.
pub fn keygen(seed: &[u8]) -> KeyPair {
    let mut counter: u32 = 0;
    loop {
        let sk = hash_p(&[seed, &counter.to_be_bytes()].concat());
        if let Ok(kp) = KeyPair::from_secret(sk) {
            return kp;
        }
        counter += 1;
    }
}

fn challenge(r: &GroupPoint, pk: &GroupPoint, message: &[u8]) -> Scalar {
    hash_p(&[b"randlock/schnorr/v1".as_slice(), &r.compress(), &pk.compress(), message].concat())
}

/// Schnorr signature with nonce `k = hash_p(sk ∥ message)`.
///
/// `R = k·G`, `e = hash_p(tag ∥ R ∥ P ∥ m)`, `s = k + e·sk`.
pub fn sig_gen(sk: &Scalar, message: &[u8]) -> Result<Signature, GroupError> {
    if sk.is_zero() {
        return Err(GroupError::ZeroKey);
    }
    let pk = sk.base_mul();
    let mut k = hash_p(&[sk.to_bytes().as_slice(), message].concat());
    if k.is_zero() {
        // Unreachable in practice; keep the nonce nonzero regardless.
        k = Scalar::ONE;
    }
    let r = k.base_mul();
    let e = challenge(&r, &pk, message);
    Ok(Signature { r, s: k + e * *sk })
}

/// Checks `s·G = R + e·P`. Degenerate keys and nonces are rejected.
pub fn sig_ver(pk: &GroupPoint, message: &[u8], sig: &Signature) -> bool {
    if pk.is_identity() || sig.r.is_identity() {
        return false;
    }
    let e = challenge(&sig.r, pk, message);
    sig.s.base_mul() == sig.r + *pk * e
}

fn decode_fixed<const N: usize>(s: &str) -> Result<[u8; N], GroupError> {
    let bytes = hex::decode(s).map_err(|e| GroupError::InvalidEncoding(e.to_string()))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| GroupError::InvalidEncoding(format!("expected {N} bytes, got {}", b.len())))
}

macro_rules! hex_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                <$ty>::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_serde!(Scalar);
hex_serde!(GroupPoint);
hex_serde!(Address);
