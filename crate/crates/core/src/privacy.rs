//! Pedersen commitments, blinding pads for algebra expressions, and
//! randomized-response differential privacy with decoy transactions.

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::crypto::{hash, KeyPair};
use crate::encoding::Encoder;
use crate::transactions::{seal, sign, LedgerTx, TransactionBody};
use crate::txalgebra::{AlgebraError, Binding, Expr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid commitment parameters: {0}")]
    InvalidParams(String),
    #[error("exponent is not in Z_q")]
    OutOfRange,
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

mod decimal {
    use super::*;

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(10))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        BigUint::parse_bytes(s.as_bytes(), 10).ok_or_else(|| serde::de::Error::custom("expected a decimal integer string"))
    }
}

/// 2048-bit MODP group prime from RFC 3526; `(p − 1) / 2` is prime.
const MODP_2048_HEX: &str = "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7EDEE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3BE39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF";

/// Group description `(p, q, g, h)`: `g` and `h` generate the order-`q`
/// subgroup of `Z_p^*`. Primality of `p` and `q` is not re-checked.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitmentParams {
    #[serde(with = "decimal")]
    pub p: BigUint,
    #[serde(with = "decimal")]
    pub q: BigUint,
    #[serde(with = "decimal")]
    pub g: BigUint,
    #[serde(with = "decimal")]
    pub h: BigUint,
}

impl fmt::Debug for CommitmentParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CommitmentParams({}-bit p, g={}, h=…)", self.p.bits(), self.g)
    }
}

impl CommitmentParams {
    pub fn new(p: BigUint, q: BigUint, g: BigUint, h: BigUint) -> Result<Self, PrivacyError> {
        let bad = |m: &str| Err(PrivacyError::InvalidParams(m.into()));
        let one = BigUint::one();
        if p <= BigUint::from(3u8) || q <= one {
            return bad("p and q too small");
        }
        if !((&p - &one) % &q).is_zero() {
            return bad("q does not divide p - 1");
        }
        for (name, x) in [("g", &g), ("h", &h)] {
            if *x <= one || *x >= p {
                return bad(&format!("{name} outside 2..p"));
            }
            if x.modpow(&q, &p) != one {
                return bad(&format!("{name} is not in the order-q subgroup"));
            }
        }
        if g == h {
            return bad("g equals h");
        }
        Ok(CommitmentParams { p, q, g, h })
    }

    /// `p = 23, q = 11, g = 2, h = 3`. Small enough to search exhaustively;
    /// `log_2 3 = 8` is trivially known, so it binds nothing in practice.
    pub fn toy() -> Self {
        Self::new(23u32.into(), 11u32.into(), 2u32.into(), 3u32.into()).expect("toy parameters are valid")
    }

    /// The 2048-bit safe-prime group with `g = 4` and `h` derived by
    /// hashing, so nobody knows `log_g h`.
    pub fn production() -> Self {
        let p = BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).expect("constant parses");
        let q = (&p - 1u32) >> 1;
        let g = BigUint::from(4u32);
        let h = hash_to_subgroup(&p, &g, b"aos/pedersen/h/v1");
        Self::new(p, q, g, h).expect("production parameters are valid")
    }

    fn check_exponent(&self, x: &BigUint) -> Result<(), PrivacyError> {
        if *x < self.q {
            Ok(())
        } else {
            Err(PrivacyError::OutOfRange)
        }
    }

    /// `E(s, t) = g^s · h^t mod p`.
    pub fn commit(&self, s: &BigUint, t: &BigUint) -> Result<Commitment, PrivacyError> {
        self.check_exponent(s)?;
        self.check_exponent(t)?;
        let value = (self.g.modpow(s, &self.p) * self.h.modpow(t, &self.p)) % &self.p;
        Ok(Commitment { value })
    }

    /// Commits with fresh randomness and returns `t` for later opening.
    pub fn commit_random<R: RngCore + CryptoRng>(&self, s: &BigUint, rng: &mut R) -> Result<(Commitment, BigUint), PrivacyError> {
        let t = rng.gen_biguint_below(&self.q);
        Ok((self.commit(s, &t)?, t))
    }

    pub fn open(&self, commitment: &Commitment, s: &BigUint, t: &BigUint) -> bool {
        self.commit(s, t).map(|c| c == *commitment).unwrap_or(false)
    }

    pub fn in_subgroup(&self, x: &BigUint) -> bool {
        !x.is_zero() && *x < self.p && x.modpow(&self.q, &self.p).is_one()
    }
}

/// Squares a hash-derived residue mod `p`, so the result lies in the
/// quadratic residues (the order-`q` subgroup of a safe-prime group).
pub fn hash_to_subgroup(p: &BigUint, avoid: &BigUint, tag: &[u8]) -> BigUint {
    let width = (p.bits() as usize + 128).div_ceil(256);
    for counter in 0u32.. {
        let mut wide = Vec::with_capacity(32 * width);
        for block in 0..width as u32 {
            let mut enc = Encoder::tagged("aos/hash-to-group/v1");
            enc.bytes(tag).u32(counter).u32(block);
            wide.extend_from_slice(hash(enc.as_slice()).as_bytes());
        }
        let x = BigUint::from_bytes_be(&wide) % p;
        let y = x.modpow(&BigUint::from(2u32), p);
        if y > BigUint::one() && y != *avoid {
            return y;
        }
    }
    unreachable!("counter space exhausted")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Commitment {
    #[serde(with = "decimal")]
    pub value: BigUint,
}

/// An expression padded with key-dependent literals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindedExpr {
    pub expr: Expr,
    pub pads: Vec<String>,
}

impl BlindedExpr {
    /// The pad assignment under which the padded expression behaves like the
    /// original.
    pub fn canonical_binding(&self, key: &[u8]) -> Binding {
        let mut b = Binding::new();
        for (i, name) in self.pads.iter().enumerate() {
            b.set(name.clone(), pad_bit(key, i));
        }
        b
    }

    /// Pad assignments an observer without the key must consider.
    pub fn candidate_space(&self) -> u128 {
        1u128.checked_shl(self.pads.len() as u32).unwrap_or(u128::MAX)
    }
}

fn pad_bit(key: &[u8], i: usize) -> bool {
    let mut enc = Encoder::tagged("aos/blind/v1");
    enc.bytes(key).u64(i as u64);
    hash(enc.as_slice()).as_bytes()[0] & 1 == 1
}

/// Conjoins `n_pad` fresh pad literals. Pad `i` appears negated when its key
/// bit is 0, so every literal is true under the canonical binding. A scale
/// on the input is kept outermost.
pub fn blind_pad(expr: &Expr, n_pad: usize, key: &[u8]) -> Result<BlindedExpr, AlgebraError> {
    expr.validate()?;
    if n_pad == 0 {
        return Ok(BlindedExpr {
            expr: expr.clone(),
            pads: Vec::new(),
        });
    }
    let vars = expr.free_vars();
    let mut prefix = String::from("_pad");
    while vars.iter().any(|v| v.starts_with(&prefix)) {
        prefix.insert(0, '_');
    }
    let pads: Vec<String> = (0..n_pad).map(|i| format!("{prefix}{i}")).collect();
    let (delta, core) = expr.split_scale()?;
    let literals = pads.iter().enumerate().map(|(i, name)| {
        let v = Expr::var(name.clone());
        if pad_bit(key, i) {
            v
        } else {
            Expr::not(v)
        }
    });
    let padded = Expr::all(std::iter::once(core).chain(literals));
    let expr = match delta {
        Some(d) => Expr::scale(d, padded),
        None => padded,
    };
    Ok(BlindedExpr { expr, pads })
}

/// Randomized-response settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPConfig {
    epsilon: f64,
}

impl DPConfig {
    /// `ε = +∞` disables flipping.
    pub fn new(epsilon: f64) -> Result<Self, PrivacyError> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(PrivacyError::BadEpsilon(epsilon));
        }
        Ok(DPConfig { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `1 / (1 + e^ε)`
    pub fn flip_probability(&self) -> f64 {
        1.0 / (1.0 + self.epsilon.exp())
    }
}

pub fn dp_randomize<R: Rng + ?Sized>(bit: bool, config: &DPConfig, rng: &mut R) -> bool {
    bit ^ rng.gen_bool(config.flip_probability())
}

/// A sealed, signed, value-zero Type A from `sender` to a throwaway key.
pub fn make_decoy<R: RngCore + CryptoRng>(sender: &KeyPair, rng: &mut R) -> LedgerTx {
    let recipient = KeyPair::generate(rng).public_key();
    let body = TransactionBody::type_a(sender.public_key(), recipient, Expr::Const(false), 0, rng.gen());
    let signed = sign(body, sender).expect("sender signs its own body");
    LedgerTx::Sealed(seal(&signed, &recipient, rng))
}

/// Adds one decoy per real transaction with the randomized-response flip
/// probability, then shuffles.
pub fn inject_decoys<R: RngCore + CryptoRng>(txs: Vec<LedgerTx>, config: &DPConfig, sender: &KeyPair, rng: &mut R) -> Vec<LedgerTx> {
    use rand::seq::SliceRandom;
    let mut out = Vec::with_capacity(txs.len() * 2);
    for tx in txs {
        out.push(tx);
        if rng.gen_bool(config.flip_probability()) {
            out.push(make_decoy(sender, rng));
        }
    }
    out.shuffle(rng);
    out
}
