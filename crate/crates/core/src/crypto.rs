//! Identifiers, hashing, signatures and public-key sealing shared by every
//! other module.
//!
//! * hashing is SHA-256,
//! * signatures are Ed25519,
//! * sealing is X25519 key agreement with an ephemeral key, HKDF-SHA256 and
//!   ChaCha20-Poly1305. The recipient's X25519 key is the Montgomery form of
//!   their Ed25519 key, so one 32 byte public key serves both purposes.

use std::fmt;
use std::str::FromStr;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Shortest seed accepted by [`KeyPair::from_seed`].
pub const MIN_SEED_LEN: usize = 16;

const SEAL_VERSION: u8 = 1;
const SEAL_HEADER_LEN: usize = 1 + 32 + 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("seed must be at least {MIN_SEED_LEN} bytes, got {0}")]
    SeedTooShort(usize),
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid public key")]
    BadPublicKey,
    #[error("decryption failed")]
    DecryptFailed,
}

/// 1-based node identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct NodeId(u32);

impl NodeId {
    /// Returns `None` for 0; ids start at 1.
    pub fn new(id: u32) -> Option<Self> {
        (id >= 1).then_some(NodeId(id))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Zero-based position in an ordered peer list.
    pub fn index(self) -> usize {
        (self.0 - 1) as usize
    }

    pub fn from_index(index: usize) -> Self {
        NodeId(index as u32 + 1)
    }
}

impl TryFrom<u32> for NodeId {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        NodeId::new(v).ok_or_else(|| "node ids start at 1".to_string())
    }
}

impl From<NodeId> for u32 {
    fn from(id: NodeId) -> u32 {
        id.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Block height. Genesis is 0.
pub type BlockIndex = u64;

/// A 32 byte SHA-256 value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest([u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Lowercase, 64 characters.
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Ok(Digest(decode_fixed::<32>(s)?))
    }

    /// First eight hex characters, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Digest::from_hex(s)
    }
}

fn decode_fixed<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    let raw = hex::decode(s).map_err(|e| CryptoError::Hex(e.to_string()))?;
    raw.as_slice().try_into().map_err(|_| CryptoError::Length {
        expected: N,
        got: raw.len(),
    })
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

hex_serde!(Digest);

/// SHA-256 of `data`.
pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 over the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Ed25519 verification key; also the sealing key (in Montgomery form).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey([u8; 32]);

impl PublicKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Result<Self, CryptoError> {
        VerifyingKey::from_bytes(&bytes).map_err(|_| CryptoError::BadPublicKey)?;
        Ok(PublicKey(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        PublicKey::from_bytes(decode_fixed::<32>(s)?)
    }

    /// Digest used as a recipient hint on sealed payloads.
    pub fn fingerprint(&self) -> Digest {
        hash(&self.0)
    }

    fn verifying_key(&self) -> VerifyingKey {
        // Validated on construction.
        VerifyingKey::from_bytes(&self.0).expect("validated public key")
    }

    pub fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
        self.verifying_key().verify(message, &sig).is_ok()
    }

    fn x25519(&self) -> x25519_dalek::PublicKey {
        x25519_dalek::PublicKey::from(self.verifying_key().to_montgomery().to_bytes())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..4]))
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

hex_serde!(PublicKey);

/// Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature([u8; 64]);

impl Signature {
    pub fn as_bytes(&self) -> &[u8; 64] {
        &self.0
    }

    pub fn from_bytes(bytes: [u8; 64]) -> Self {
        Signature(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Ok(Signature(decode_fixed::<64>(s)?))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..4]))
    }
}

hex_serde!(Signature);

/// Signing and unsealing secret plus its public key.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public: PublicKey,
}

impl KeyPair {
    /// Derives a keypair deterministically from `seed`.
    pub fn from_seed(seed: &[u8]) -> Result<Self, CryptoError> {
        if seed.len() < MIN_SEED_LEN {
            return Err(CryptoError::SeedTooShort(seed.len()));
        }
        let secret = hash_parts(&[b"aos/keypair/v1", seed]);
        let signing = SigningKey::from_bytes(secret.as_bytes());
        let public = PublicKey(signing.verifying_key().to_bytes());
        Ok(KeyPair { signing, public })
    }

    /// Fresh keypair from `rng`.
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        KeyPair::from_seed(&seed).expect("32 byte seed")
    }

    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }

    fn x25519_secret(&self) -> x25519_dalek::StaticSecret {
        x25519_dalek::StaticSecret::from(self.signing.to_scalar_bytes())
    }

    /// Decrypts a payload produced by [`seal`] for this key.
    pub fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if sealed.len() < SEAL_HEADER_LEN || sealed[0] != SEAL_VERSION {
            return Err(CryptoError::DecryptFailed);
        }
        let eph: [u8; 32] = sealed[1..33].try_into().unwrap();
        let nonce = Nonce::from_slice(&sealed[33..SEAL_HEADER_LEN]);
        let shared = self
            .x25519_secret()
            .diffie_hellman(&x25519_dalek::PublicKey::from(eph));
        if !shared.was_contributory() {
            return Err(CryptoError::DecryptFailed);
        }
        let cipher = seal_cipher(shared.as_bytes(), &eph, &self.public);
        cipher
            .decrypt(
                nonce,
                Payload {
                    msg: &sealed[SEAL_HEADER_LEN..],
                    aad: self.public.as_bytes(),
                },
            )
            .map_err(|_| CryptoError::DecryptFailed)
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

fn seal_cipher(shared: &[u8; 32], eph: &[u8; 32], recipient: &PublicKey) -> ChaCha20Poly1305 {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph);
    salt[32..].copy_from_slice(recipient.as_bytes());
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut key = [0u8; 32];
    hk.expand(b"aos/seal/v1", &mut key)
        .expect("32 bytes is a valid HKDF output length");
    ChaCha20Poly1305::new(Key::from_slice(&key))
}

/// Encrypts `plaintext` to `recipient`.
///
/// Layout: `version (1) ‖ ephemeral X25519 key (32) ‖ nonce (12) ‖ AEAD ciphertext`.
/// Every call draws a fresh ephemeral key, so sealing the same plaintext twice
/// gives different bytes.
pub fn seal<R: RngCore + CryptoRng>(rng: &mut R, recipient: &PublicKey, plaintext: &[u8]) -> Vec<u8> {
    let eph_secret = x25519_dalek::StaticSecret::random_from_rng(&mut *rng);
    let eph_public = x25519_dalek::PublicKey::from(&eph_secret);
    let shared = eph_secret.diffie_hellman(&recipient.x25519());
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let cipher = seal_cipher(shared.as_bytes(), eph_public.as_bytes(), recipient);
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: recipient.as_bytes(),
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(SEAL_HEADER_LEN + ct.len());
    out.push(SEAL_VERSION);
    out.extend_from_slice(eph_public.as_bytes());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}
