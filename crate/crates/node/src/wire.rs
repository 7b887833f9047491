//! Length-prefixed envelopes exchanged between nodes and clients.
//!
//! A frame is a big-endian u32 length followed by that many bytes of JSON
//! encoding a [`WireEnvelope`]. Signatures cover canonical bytes, never
//! the JSON text of the envelope itself.

use std::io::{self, Read, Write};

use aos_core::agreement::ReplicaMessage;
use aos_core::crypto::{KeyPair, NodeId, PublicKey, Signature};
use aos_core::encoding::Encoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WIRE_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

pub const KIND_SUBMIT_TX: &str = "submit_tx";
pub const KIND_SUBMIT_ACK: &str = "submit_ack";
pub const KIND_STATUS: &str = "status";
pub const KIND_STATUS_REPLY: &str = "status_reply";
pub const KIND_ERROR: &str = "error";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("unsupported wire version {0}")]
    Version(u32),
    #[error("envelope from another network")]
    Network,
    #[error("missing sender or signature")]
    Unsigned,
    #[error("unknown sender {0}")]
    UnknownSender(NodeId),
    #[error("bad envelope signature")]
    BadSignature,
    #[error("envelope kind `{0}` does not match its body")]
    KindMismatch(String),
}

impl WireError {
    /// Short code used in drop logs.
    pub fn code(&self) -> &'static str {
        match self {
            WireError::Io(_) => "io",
            WireError::TooLarge(_) => "too_large",
            WireError::Malformed(_) => "malformed",
            WireError::Version(_) => "bad_version",
            WireError::Network => "wrong_network",
            WireError::Unsigned => "unsigned",
            WireError::UnknownSender(_) => "unknown_sender",
            WireError::BadSignature => "bad_signature",
            WireError::KindMismatch(_) => "kind_mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEnvelope {
    pub version: u32,
    pub network_id: String,
    pub kind: String,
    /// Set on node-to-node traffic only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<NodeId>,
    /// JSON of the payload.
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<Signature>,
}

fn signing_bytes(version: u32, network_id: &str, kind: &str, sender: NodeId, body: &str) -> Vec<u8> {
    let mut enc = Encoder::tagged("aos/wire/v1");
    enc.u32(version).str(network_id).str(kind).u32(sender.get()).str(body);
    enc.finish()
}

impl WireEnvelope {
    /// Unsigned client envelope.
    pub fn client<T: Serialize>(network_id: &str, kind: &str, body: &T) -> Self {
        WireEnvelope {
            version: WIRE_VERSION,
            network_id: network_id.to_string(),
            kind: kind.to_string(),
            sender: None,
            body: serde_json::to_string(body).expect("payload serializes"),
            signature: None,
        }
    }

    pub fn replica(network_id: &str, sender: NodeId, keys: &KeyPair, msg: &ReplicaMessage) -> Self {
        let kind = msg.kind();
        let body = serde_json::to_string(msg).expect("replica message serializes");
        let signature = keys.sign(&signing_bytes(WIRE_VERSION, network_id, kind, sender, &body));
        WireEnvelope {
            version: WIRE_VERSION,
            network_id: network_id.to_string(),
            kind: kind.to_string(),
            sender: Some(sender),
            body,
            signature: Some(signature),
        }
    }

    /// Checks version and network, then the signature against `roster`,
    /// before decoding the body.
    pub fn open_replica(&self, network_id: &str, roster: &[PublicKey]) -> Result<(NodeId, ReplicaMessage), WireError> {
        self.check_header(network_id)?;
        let (Some(sender), Some(sig)) = (self.sender, self.signature) else {
            return Err(WireError::Unsigned);
        };
        let key = roster.get(sender.index()).ok_or(WireError::UnknownSender(sender))?;
        if !key.verify(&signing_bytes(self.version, &self.network_id, &self.kind, sender, &self.body), &sig) {
            return Err(WireError::BadSignature);
        }
        let msg: ReplicaMessage = serde_json::from_str(&self.body).map_err(|e| WireError::Malformed(e.to_string()))?;
        if msg.kind() != self.kind {
            return Err(WireError::KindMismatch(self.kind.clone()));
        }
        Ok((sender, msg))
    }

    pub fn check_header(&self, network_id: &str) -> Result<(), WireError> {
        if self.version != WIRE_VERSION {
            return Err(WireError::Version(self.version));
        }
        if self.network_id != network_id {
            return Err(WireError::Network);
        }
        Ok(())
    }

    pub fn decode_body<T: for<'de> Deserialize<'de>>(&self) -> Result<T, WireError> {
        serde_json::from_str(&self.body).map_err(|e| WireError::Malformed(e.to_string()))
    }

    pub fn to_frame(&self) -> Vec<u8> {
        let json = serde_json::to_vec(self).expect("envelope serializes");
        let mut frame = Vec::with_capacity(4 + json.len());
        frame.extend_from_slice(&(json.len() as u32).to_be_bytes());
        frame.extend_from_slice(&json);
        frame
    }
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn parse_envelope(frame: &[u8]) -> Result<WireEnvelope, WireError> {
    serde_json::from_slice(frame).map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn write_envelope<W: Write>(w: &mut W, env: &WireEnvelope) -> Result<(), WireError> {
    w.write_all(&env.to_frame())?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub tx_id: aos_core::crypto::Digest,
    /// False when the pool already held the transaction.
    pub queued: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReply {
    pub node_id: NodeId,
    pub height: u64,
    pub tip_hash: aos_core::crypto::Digest,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub error: String,
}
