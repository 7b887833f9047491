//! Type A (awaiting) and Type B (invoking) transactions.
//!
//! A sender signs a [`TransactionBody`] and seals the signed transaction to
//! the recipient's public key. Type A transactions sit on the ledger sealed
//! until their recipient opens one and publishes a Type B [`Invocation`]
//! that discloses the opened Type A and supplies bindings for its program.
//! Every node then evaluates the program and applies the same balance delta.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, hash, CryptoError, Digest, KeyPair, PublicKey, Signature};
use crate::encoding::{Canonical, Encoder};
use crate::txalgebra::{evaluate, AlgebraError, Binding, Expr};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxError {
    #[error("signing key does not match body.sender")]
    KeyMismatch,
    #[error("decryption failed")]
    DecryptFailed,
    #[error("signature does not verify under the sender key")]
    BadSignature,
    #[error("malformed transaction: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail", rename_all = "snake_case")]
pub enum InvokeError {
    #[error("target transaction already consumed")]
    AlreadyConsumed,
    #[error("variable `{0}` has no binding")]
    UnboundVariable(String),
    #[error("binding for `{0}` is not a variable of the target program")]
    UnexpectedBinding(String),
    #[error("target transaction not found on the ledger")]
    TargetNotFound,
    #[error("invocation does not reference the supplied target")]
    TargetMismatch,
    #[error("invoker is not the recipient of the target")]
    NotRecipient,
    #[error("wrong transaction type")]
    WrongType,
    #[error("bad signature on {0}")]
    BadSignature(String),
    #[error("insufficient funds: need {needed}, have {available}")]
    InsufficientFunds { needed: u64, available: u64 },
    #[error("algebra error: {0}")]
    Algebra(String),
}

impl From<AlgebraError> for InvokeError {
    fn from(e: AlgebraError) -> Self {
        match e {
            AlgebraError::UnboundVariable(v) => InvokeError::UnboundVariable(v),
            other => InvokeError::Algebra(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxType {
    TypeA,
    TypeB,
}

/// What the transaction does.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Program {
    /// Type A: a program awaiting invocation.
    Await { expr: Expr },
    /// Type B: invoke `target` with `bindings`.
    Invoke { target: Digest, bindings: Binding },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionBody {
    pub sender: PublicKey,
    pub recipient: PublicKey,
    pub program: Program,
    /// Units moved per unit of a boolean program result. Ignored when the
    /// program carries its own scale factor.
    pub value: u64,
    /// Distinguishes otherwise identical transactions.
    pub nonce: u64,
}

impl TransactionBody {
    pub fn type_a(sender: PublicKey, recipient: PublicKey, expr: Expr, value: u64, nonce: u64) -> Self {
        TransactionBody {
            sender,
            recipient,
            program: Program::Await { expr },
            value,
            nonce,
        }
    }

    pub fn type_b(sender: PublicKey, recipient: PublicKey, target: Digest, bindings: Binding, nonce: u64) -> Self {
        TransactionBody {
            sender,
            recipient,
            program: Program::Invoke { target, bindings },
            value: 0,
            nonce,
        }
    }

    pub fn tx_type(&self) -> TxType {
        match self.program {
            Program::Await { .. } => TxType::TypeA,
            Program::Invoke { .. } => TxType::TypeB,
        }
    }

    /// Hash of the canonical body bytes.
    pub fn tx_id(&self) -> Digest {
        hash(&self.canonical_bytes())
    }
}

impl Canonical for TransactionBody {
    fn encode(&self, enc: &mut Encoder) {
        enc.str("aos/tx/v1");
        match &self.program {
            Program::Await { .. } => enc.u8(1),
            Program::Invoke { .. } => enc.u8(2),
        };
        enc.raw32(self.sender.as_bytes()).raw32(self.recipient.as_bytes());
        match &self.program {
            Program::Await { expr } => expr.encode(enc),
            Program::Invoke { target, bindings } => {
                enc.digest(target);
                bindings.encode(enc);
            }
        }
        enc.u64(self.value).u64(self.nonce);
    }
}

/// A body plus the sender's signature over its canonical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedTransaction {
    pub body: TransactionBody,
    pub signature: Signature,
}

impl SignedTransaction {
    pub fn tx_id(&self) -> Digest {
        self.body.tx_id()
    }

    pub fn verify(&self) -> bool {
        self.body.sender.verify(&self.body.canonical_bytes(), &self.signature)
    }
}

/// Signs `body` with the sender's key.
pub fn sign(body: TransactionBody, sender: &KeyPair) -> Result<SignedTransaction, TxError> {
    if body.sender != sender.public_key() {
        return Err(TxError::KeyMismatch);
    }
    let signature = sender.sign(&body.canonical_bytes());
    Ok(SignedTransaction { body, signature })
}

/// A signed transaction encrypted to its recipient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedTransaction {
    /// Identifier of the inner body, readable without the key.
    pub tx_id: Digest,
    /// Fingerprint of the recipient public key.
    pub recipient_hint: Digest,
    #[serde(with = "hex_bytes")]
    pub ciphertext: Vec<u8>,
}

impl Canonical for SealedTransaction {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.tx_id).digest(&self.recipient_hint).bytes(&self.ciphertext);
    }
}

/// Encrypts `signed` to `recipient`. Randomized: two seals differ.
pub fn seal<R: RngCore + CryptoRng>(signed: &SignedTransaction, recipient: &PublicKey, rng: &mut R) -> SealedTransaction {
    let plaintext = serde_json::to_vec(signed).expect("transaction serializes");
    SealedTransaction {
        tx_id: signed.tx_id(),
        recipient_hint: recipient.fingerprint(),
        ciphertext: crypto::seal(rng, recipient, &plaintext),
    }
}

/// Decrypts with the recipient key and checks the sender's signature.
pub fn open_and_verify(sealed: &SealedTransaction, recipient: &KeyPair) -> Result<SignedTransaction, TxError> {
    if sealed.recipient_hint != recipient.public_key().fingerprint() {
        return Err(TxError::DecryptFailed);
    }
    let plain = recipient.open(&sealed.ciphertext).map_err(|e| match e {
        CryptoError::DecryptFailed => TxError::DecryptFailed,
        other => TxError::Malformed(other.to_string()),
    })?;
    let signed: SignedTransaction =
        serde_json::from_slice(&plain).map_err(|e| TxError::Malformed(e.to_string()))?;
    if !signed.verify() {
        return Err(TxError::BadSignature);
    }
    if signed.tx_id() != sealed.tx_id {
        return Err(TxError::Malformed("sealed tx_id does not match body".into()));
    }
    Ok(signed)
}

/// A Type B transaction together with the Type A it invokes, as opened by
/// the invoker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub invoke: SignedTransaction,
    pub target: SignedTransaction,
}

impl Invocation {
    /// Signature and shape checks that need no ledger state.
    pub fn check(&self) -> Result<(), InvokeError> {
        if self.invoke.body.tx_type() != TxType::TypeB || self.target.body.tx_type() != TxType::TypeA {
            return Err(InvokeError::WrongType);
        }
        if !self.invoke.verify() {
            return Err(InvokeError::BadSignature("invocation".into()));
        }
        if !self.target.verify() {
            return Err(InvokeError::BadSignature("target".into()));
        }
        Ok(())
    }
}

/// A block entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerTx {
    /// Type A, confidential until invoked.
    Sealed(SealedTransaction),
    /// Type B with its opened target.
    Invocation(Invocation),
}

impl LedgerTx {
    pub fn id(&self) -> Digest {
        match self {
            LedgerTx::Sealed(s) => s.tx_id,
            LedgerTx::Invocation(i) => i.invoke.tx_id(),
        }
    }

    pub fn tx_type(&self) -> TxType {
        match self {
            LedgerTx::Sealed(_) => TxType::TypeA,
            LedgerTx::Invocation(_) => TxType::TypeB,
        }
    }

    /// Admission check for transaction pools.
    pub fn check_structure(&self) -> Result<(), TxError> {
        match self {
            LedgerTx::Sealed(s) => {
                if s.ciphertext.is_empty() {
                    Err(TxError::Malformed("empty ciphertext".into()))
                } else {
                    Ok(())
                }
            }
            LedgerTx::Invocation(i) => i.check().map_err(|e| match e {
                InvokeError::BadSignature(_) => TxError::BadSignature,
                other => TxError::Malformed(other.to_string()),
            }),
        }
    }
}

impl Canonical for LedgerTx {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            LedgerTx::Sealed(s) => {
                enc.u8(1);
                s.encode(enc);
            }
            LedgerTx::Invocation(i) => {
                enc.u8(2);
                for signed in [&i.invoke, &i.target] {
                    signed.body.encode(enc);
                    enc.bytes(signed.signature.as_bytes());
                }
            }
        }
    }
}

/// Balance change produced by a successful invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDelta {
    pub consumed: Digest,
    pub from: PublicKey,
    pub to: PublicKey,
    pub amount: u64,
}

/// Accounts plus the Type A registry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerState {
    pub balances: BTreeMap<PublicKey, u64>,
    /// Type A ids committed to the ledger, with the height they landed at.
    pub awaiting: BTreeMap<Digest, u64>,
    pub consumed: BTreeSet<Digest>,
}

impl LedgerState {
    pub fn with_balances(balances: impl IntoIterator<Item = (PublicKey, u64)>) -> Self {
        LedgerState {
            balances: balances.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn balance(&self, key: &PublicKey) -> u64 {
        self.balances.get(key).copied().unwrap_or(0)
    }

    pub fn total_supply(&self) -> u128 {
        self.balances.values().map(|&v| v as u128).sum()
    }

    /// Registers a committed Type A. Returns false if it was already known.
    pub fn register(&mut self, tx_id: Digest, height: u64) -> bool {
        if self.awaiting.contains_key(&tx_id) {
            return false;
        }
        self.awaiting.insert(tx_id, height);
        true
    }

    /// Applies a block's entries in order.
    pub fn apply_block(&mut self, height: u64, txs: &[LedgerTx]) -> Vec<TxOutcome> {
        txs.iter()
            .map(|tx| {
                let result = match tx {
                    LedgerTx::Sealed(s) => {
                        if self.register(s.tx_id, height) {
                            Ok(None)
                        } else {
                            Err(TxFailure::Duplicate)
                        }
                    }
                    LedgerTx::Invocation(inv) => inv
                        .check()
                        .and_then(|()| invoke(&inv.target.body, &inv.invoke.body, self))
                        .map(Some)
                        .map_err(TxFailure::Invoke),
                };
                TxOutcome {
                    tx_id: tx.id(),
                    height,
                    result,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxFailure {
    Duplicate,
    Invoke(InvokeError),
}

/// Receipt for one block entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxOutcome {
    pub tx_id: Digest,
    pub height: u64,
    pub result: Result<Option<StateDelta>, TxFailure>,
}

/// Evaluates `type_a`'s program under `type_b`'s bindings and moves the
/// resulting amount from the Type A sender to its recipient.
///
/// The Type A transaction is consumed on success, including when the
/// program evaluates to zero.
pub fn invoke(type_a: &TransactionBody, type_b: &TransactionBody, state: &mut LedgerState) -> Result<StateDelta, InvokeError> {
    let Program::Await { expr } = &type_a.program else {
        return Err(InvokeError::WrongType);
    };
    let Program::Invoke { target, bindings } = &type_b.program else {
        return Err(InvokeError::WrongType);
    };
    let target_id = type_a.tx_id();
    if *target != target_id {
        return Err(InvokeError::TargetMismatch);
    }
    if !state.awaiting.contains_key(&target_id) {
        return Err(InvokeError::TargetNotFound);
    }
    if state.consumed.contains(&target_id) {
        return Err(InvokeError::AlreadyConsumed);
    }
    if type_b.sender != type_a.recipient {
        return Err(InvokeError::NotRecipient);
    }
    let vars = expr.free_vars();
    if let Some(extra) = bindings.names().find(|n| !vars.contains(*n)) {
        return Err(InvokeError::UnexpectedBinding(extra.to_string()));
    }
    let result = evaluate(expr, bindings)?;
    let amount = if expr.is_scaled() {
        result
    } else {
        result
            .checked_mul(type_a.value)
            .ok_or_else(|| InvokeError::Algebra(AlgebraError::Overflow.to_string()))?
    };
    let available = state.balance(&type_a.sender);
    if amount > available {
        return Err(InvokeError::InsufficientFunds { needed: amount, available });
    }
    if amount > 0 && type_a.sender != type_a.recipient {
        *state.balances.entry(type_a.sender).or_insert(0) -= amount;
        *state.balances.entry(type_a.recipient).or_insert(0) += amount;
    }
    state.consumed.insert(target_id);
    Ok(StateDelta {
        consumed: target_id,
        from: type_a.sender,
        to: type_a.recipient,
        amount,
    })
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Actors {
        alice: KeyPair,
        bob: KeyPair,
        eve: KeyPair,
        rng: ChaCha8Rng,
    }

    fn actors() -> Actors {
        Actors {
            alice: KeyPair::from_seed(b"alice-test-seed-0001").unwrap(),
            bob: KeyPair::from_seed(b"bob-test-seed-000001").unwrap(),
            eve: KeyPair::from_seed(b"eve-test-seed-000001").unwrap(),
            rng: ChaCha8Rng::seed_from_u64(7),
        }
    }

    fn offer(a: &Actors, program: &str, value: u64) -> SignedTransaction {
        let body = TransactionBody::type_a(a.alice.public_key(), a.bob.public_key(), program.parse().unwrap(), value, 1);
        sign(body, &a.alice).unwrap()
    }

    #[test]
    fn sign_verify_and_tamper() {
        let a = actors();
        let signed = offer(&a, "A & B", 10);
        assert!(signed.verify());
        let mut wrong_key = signed.clone();
        wrong_key.body.sender = a.eve.public_key();
        assert!(!wrong_key.verify());
        let mut tampered = signed.clone();
        tampered.body.value = 11;
        assert!(!tampered.verify());
        let body = signed.body.clone();
        assert_eq!(sign(body, &a.eve).unwrap_err(), TxError::KeyMismatch);
    }

    #[test]
    fn seal_open_roundtrip() {
        let mut a = actors();
        let signed = offer(&a, "A & B", 10);
        let s1 = seal(&signed, &a.bob.public_key(), &mut a.rng);
        let s2 = seal(&signed, &a.bob.public_key(), &mut a.rng);
        assert_ne!(s1.ciphertext, s2.ciphertext);
        assert_eq!(open_and_verify(&s1, &a.bob).unwrap(), signed);
        assert_eq!(open_and_verify(&s1, &a.eve).unwrap_err(), TxError::DecryptFailed);
        // Wrong key even with a spoofed hint.
        let mut spoofed = s1.clone();
        spoofed.recipient_hint = a.eve.public_key().fingerprint();
        assert_eq!(open_and_verify(&spoofed, &a.eve).unwrap_err(), TxError::DecryptFailed);
    }

    #[test]
    fn strip_and_reseal_forgery_is_caught() {
        let mut a = actors();
        let signed = offer(&a, "A & B", 10);
        let mut forged = signed.clone();
        forged.body.value = 1_000;
        let resealed = seal(&forged, &a.bob.public_key(), &mut a.rng);
        assert_eq!(open_and_verify(&resealed, &a.bob).unwrap_err(), TxError::BadSignature);
    }

    fn funded(a: &Actors, amount: u64) -> LedgerState {
        LedgerState::with_balances([(a.alice.public_key(), amount), (a.bob.public_key(), 0)])
    }

    fn invocation(a: &Actors, target: &SignedTransaction, bindings: &str) -> TransactionBody {
        TransactionBody::type_b(a.bob.public_key(), a.alice.public_key(), target.tx_id(), bindings.parse().unwrap(), 2)
    }

    #[test]
    fn example_one_transfer() {
        let a = actors();
        let target = offer(&a, "A & B", 10);
        let mut state = funded(&a, 100);
        state.register(target.tx_id(), 1);
        let delta = invoke(&target.body, &invocation(&a, &target, "A=1,B=1"), &mut state).unwrap();
        assert_eq!(delta.amount, 10);
        assert_eq!(state.balance(&a.alice.public_key()), 90);
        assert_eq!(state.balance(&a.bob.public_key()), 10);
        assert_eq!(state.total_supply(), 100);
        let again = invoke(&target.body, &invocation(&a, &target, "A=1,B=1"), &mut state);
        assert_eq!(again.unwrap_err(), InvokeError::AlreadyConsumed);
    }

    #[test]
    fn false_condition_moves_nothing() {
        let a = actors();
        let target = offer(&a, "A & B", 10);
        let mut state = funded(&a, 100);
        state.register(target.tx_id(), 1);
        let delta = invoke(&target.body, &invocation(&a, &target, "A=1,B=0"), &mut state).unwrap();
        assert_eq!(delta.amount, 0);
        assert_eq!(state.balance(&a.alice.public_key()), 100);
    }

    #[test]
    fn scaled_program_uses_its_own_delta() {
        let a = actors();
        let target = offer(&a, "50 * (A & (B | C))", 999);
        let mut state = funded(&a, 100);
        state.register(target.tx_id(), 1);
        let delta = invoke(&target.body, &invocation(&a, &target, "A=1,B=0,C=1"), &mut state).unwrap();
        assert_eq!(delta.amount, 50);
    }

    #[test]
    fn invoke_error_paths() {
        let a = actors();
        let target = offer(&a, "A & B", 10);
        let mut state = funded(&a, 5);
        assert_eq!(
            invoke(&target.body, &invocation(&a, &target, "A=1,B=1"), &mut state).unwrap_err(),
            InvokeError::TargetNotFound
        );
        state.register(target.tx_id(), 1);
        assert_eq!(
            invoke(&target.body, &invocation(&a, &target, "A=1"), &mut state).unwrap_err(),
            InvokeError::UnboundVariable("B".into())
        );
        assert_eq!(
            invoke(&target.body, &invocation(&a, &target, "A=1,B=1,Z=0"), &mut state).unwrap_err(),
            InvokeError::UnexpectedBinding("Z".into())
        );
        assert_eq!(
            invoke(&target.body, &invocation(&a, &target, "A=1,B=1"), &mut state).unwrap_err(),
            InvokeError::InsufficientFunds { needed: 10, available: 5 }
        );
        let by_eve = TransactionBody::type_b(a.eve.public_key(), a.alice.public_key(), target.tx_id(), "A=1,B=1".parse().unwrap(), 3);
        assert_eq!(invoke(&target.body, &by_eve, &mut state).unwrap_err(), InvokeError::NotRecipient);
        let other = offer(&a, "A", 1);
        assert_eq!(
            invoke(&other.body, &invocation(&a, &target, "A=1,B=1"), &mut state).unwrap_err(),
            InvokeError::TargetMismatch
        );
        assert!(state.consumed.is_empty());
    }

    #[test]
    fn apply_block_records_outcomes() {
        let mut a = actors();
        let target = offer(&a, "A & B", 10);
        let sealed = seal(&target, &a.bob.public_key(), &mut a.rng);
        let opened = open_and_verify(&sealed, &a.bob).unwrap();
        let b_body = invocation(&a, &opened, "A=1,B=1");
        let inv = Invocation {
            invoke: sign(b_body, &a.bob).unwrap(),
            target: opened,
        };
        let mut state = funded(&a, 100);
        let outcomes = state.apply_block(1, &[LedgerTx::Sealed(sealed.clone()), LedgerTx::Invocation(inv.clone())]);
        assert!(outcomes[0].result.is_ok());
        assert_eq!(outcomes[1].result.as_ref().unwrap().as_ref().unwrap().amount, 10);
        let replay = state.apply_block(2, &[LedgerTx::Sealed(sealed), LedgerTx::Invocation(inv)]);
        assert_eq!(replay[0].result, Err(TxFailure::Duplicate));
        assert_eq!(replay[1].result, Err(TxFailure::Invoke(InvokeError::AlreadyConsumed)));
        assert_eq!(state.total_supply(), 100);
    }

    #[test]
    fn ledger_tx_json_roundtrip() {
        let mut a = actors();
        let target = offer(&a, "50 * (A & (B | C))", 0);
        let tx = LedgerTx::Sealed(seal(&target, &a.bob.public_key(), &mut a.rng));
        let json = serde_json::to_string(&tx).unwrap();
        assert!(json.contains("\"kind\":\"sealed\""));
        let back: LedgerTx = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tx);
    }
}
