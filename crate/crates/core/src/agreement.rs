//! Per-node agreement state machine.
//!
//! A [`Replica`] is driven by inbound messages, timer ticks and submitted
//! transactions. Each input returns a [`Step`] holding the messages to send
//! and any blocks committed; transport and clocks belong to the caller.
//! Time is an opaque `u64`, simulator ticks or wall-clock milliseconds.
//!
//! Honest replicas accept at most one proposal per height. Committing needs
//! a resolution quorum on a proposal the replica holds and has verified.
//! A replica that falls behind recovers by fetching commit certificates
//! (the signed `ProposalCreated` plus a resolution quorum) from peers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{BlockIndex, Digest, KeyPair, NodeId, PublicKey, Signature};
use crate::encoding::Encoder;
use crate::ledger::{Block, Chain};
use crate::proposals::{create_proposal, is_my_turn, pce, pvf, CommittedTip, Proposal, ProposalError, ProposalState, VerdictReason};
use crate::transactions::{LedgerState, LedgerTx, TxError, TxOutcome};

/// Votes for proposals not yet seen, across all heights.
pub const MAX_ORPHAN_VOTES: usize = 1024;
/// `ProposalCreated` messages for heights beyond the next one.
pub const MAX_FUTURE_PROPOSALS: usize = 64;
/// Heights for which commit certificates are kept for lagging peers.
pub const CERTIFICATE_RETENTION: u64 = 1024;
pub const MAX_SYNC_BATCH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgreementError {
    #[error("network needs at least one node")]
    EmptyNetwork,
    #[error("round timeout must be positive")]
    ZeroTimeout,
    #[error("roster has {got} keys for {n} nodes")]
    RosterSize { got: usize, n: usize },
    #[error("node {0} is not in the roster")]
    NotInRoster(NodeId),
    #[error("local key does not match the roster entry for node {0}")]
    KeyMismatch(NodeId),
    #[error("stored chain does not replay: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n: usize,
    pub f: usize,
    pub response_quorum: usize,
    pub resolution_quorum: usize,
    pub round_timeout: u64,
}

impl NetworkConfig {
    /// `f = ⌊(n−1)/3⌋`, both quorums `2f+1`.
    pub fn new(n: usize, round_timeout: u64) -> Result<Self, AgreementError> {
        if n == 0 {
            return Err(AgreementError::EmptyNetwork);
        }
        if round_timeout == 0 {
            return Err(AgreementError::ZeroTimeout);
        }
        let f = (n - 1) / 3;
        Ok(NetworkConfig {
            n,
            f,
            response_quorum: 2 * f + 1,
            resolution_quorum: 2 * f + 1,
            round_timeout,
        })
    }

    /// Rejections beyond this make the response quorum unreachable.
    pub fn max_rejections(&self) -> usize {
        self.n - self.response_quorum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ProposalCreated,
    ProposalResponse,
    ProposalResolution,
}

impl MessageKind {
    fn code(self) -> u8 {
        match self {
            MessageKind::ProposalCreated => 1,
            MessageKind::ProposalResponse => 2,
            MessageKind::ProposalResolution => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementMessage {
    pub kind: MessageKind,
    pub proposal_hash: Digest,
    pub sender: NodeId,
    pub accept: bool,
    /// Present on `ProposalCreated` only. Authenticated through
    /// `proposal_hash`, which covers every proposal field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Proposal>,
    pub signature: Signature,
}

impl AgreementMessage {
    pub fn signing_bytes(kind: MessageKind, proposal_hash: &Digest, sender: NodeId, accept: bool) -> Vec<u8> {
        let mut enc = Encoder::tagged("aos/agreement/v1");
        enc.u8(kind.code()).digest(proposal_hash).u32(sender.get()).bool(accept);
        enc.finish()
    }

    pub fn signed(
        keys: &KeyPair,
        sender: NodeId,
        kind: MessageKind,
        proposal_hash: Digest,
        accept: bool,
        payload: Option<Proposal>,
    ) -> Self {
        let signature = keys.sign(&Self::signing_bytes(kind, &proposal_hash, sender, accept));
        AgreementMessage {
            kind,
            proposal_hash,
            sender,
            accept,
            payload,
            signature,
        }
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(
            &Self::signing_bytes(self.kind, &self.proposal_hash, self.sender, self.accept),
            &self.signature,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CertificateError {
    #[error("certificate does not carry a proposal")]
    MissingPayload,
    #[error("certificate holds a message of the wrong kind")]
    WrongKind,
    #[error("unknown signer {0}")]
    UnknownSigner(NodeId),
    #[error("bad signature from {0}")]
    BadSignature(NodeId),
    #[error("proposal was not created by the elected node")]
    WrongProposer,
    #[error("proposal fails verification: {0:?}")]
    InvalidProposal(VerdictReason),
    #[error("resolution refers to a different proposal")]
    HashMismatch,
    #[error("signer {0} appears twice")]
    DuplicateSigner(NodeId),
    #[error("{got} resolutions, quorum is {need}")]
    InsufficientQuorum { got: usize, need: usize },
}

/// Evidence that a proposal was committed: its signed creation message and
/// a resolution quorum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitCertificate {
    pub created: AgreementMessage,
    pub resolutions: Vec<AgreementMessage>,
}

impl CommitCertificate {
    pub fn height(&self) -> Option<BlockIndex> {
        self.created.payload.as_ref().map(Proposal::height)
    }

    /// Checks the certificate against a node whose tip is `tip`.
    pub fn verify(&self, network: &NetworkConfig, roster: &[PublicKey], tip: &CommittedTip) -> Result<(), CertificateError> {
        let key_of = |id: NodeId| roster.get(id.index()).ok_or(CertificateError::UnknownSigner(id));
        let created = &self.created;
        if created.kind != MessageKind::ProposalCreated {
            return Err(CertificateError::WrongKind);
        }
        let proposal = created.payload.as_ref().ok_or(CertificateError::MissingPayload)?;
        if !created.verify(key_of(created.sender)?) {
            return Err(CertificateError::BadSignature(created.sender));
        }
        if pce(network.n, tip.height).ok() != Some(created.sender) || proposal.proposer != created.sender {
            return Err(CertificateError::WrongProposer);
        }
        if proposal.hash != created.proposal_hash {
            return Err(CertificateError::HashMismatch);
        }
        let verdict = pvf(proposal, tip.height, tip);
        if !verdict.accepted {
            return Err(CertificateError::InvalidProposal(verdict.reason));
        }
        let mut signers = BTreeSet::new();
        for r in &self.resolutions {
            if r.kind != MessageKind::ProposalResolution {
                return Err(CertificateError::WrongKind);
            }
            if r.proposal_hash != proposal.hash {
                return Err(CertificateError::HashMismatch);
            }
            if !r.verify(key_of(r.sender)?) {
                return Err(CertificateError::BadSignature(r.sender));
            }
            if !signers.insert(r.sender) {
                return Err(CertificateError::DuplicateSigner(r.sender));
            }
        }
        if signers.len() < network.resolution_quorum {
            return Err(CertificateError::InsufficientQuorum {
                got: signers.len(),
                need: network.resolution_quorum,
            });
        }
        Ok(())
    }
}

/// Everything a replica sends or receives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum ReplicaMessage {
    Agreement(AgreementMessage),
    /// Asks for certificates of heights `from_height..`.
    SyncRequest { from_height: BlockIndex },
    SyncResponse { certificates: Vec<CommitCertificate> },
    /// A transaction forwarded for inclusion in a later proposal.
    Transaction(LedgerTx),
}

impl ReplicaMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ReplicaMessage::Agreement(m) => match m.kind {
                MessageKind::ProposalCreated => "proposal_created",
                MessageKind::ProposalResponse => "proposal_response",
                MessageKind::ProposalResolution => "proposal_resolution",
            },
            ReplicaMessage::SyncRequest { .. } => "sync_request",
            ReplicaMessage::SyncResponse { .. } => "sync_response",
            ReplicaMessage::Transaction(_) => "transaction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "to", content = "node", rename_all = "snake_case")]
pub enum Destination {
    /// Every peer except the sender.
    All,
    To(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub to: Destination,
    pub msg: ReplicaMessage,
}

impl Outbound {
    fn all(msg: AgreementMessage) -> Self {
        Outbound {
            to: Destination::All,
            msg: ReplicaMessage::Agreement(msg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    BadSignature,
    UnknownSender,
    Malformed,
    Stale,
    Duplicate,
    BufferFull,
    InvalidCertificate,
    Halted,
}

/// How an input was handled. Every inbound message maps to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "disposition", content = "reason", rename_all = "snake_case")]
pub enum Disposition {
    /// Timer step with nothing to report.
    #[default]
    Idle,
    /// Produced protocol messages in reply.
    Responded,
    /// Counted toward a quorum without a reply being due yet.
    Recorded,
    /// Held until the proposal it depends on arrives.
    Buffered,
    Committed,
    Dropped(DropReason),
}

#[derive(Debug, Clone, Default)]
pub struct Step {
    pub outbound: Vec<Outbound>,
    pub committed: Vec<Block>,
    pub outcomes: Vec<TxOutcome>,
    pub disposition: Disposition,
}

impl Step {
    fn absorb(&mut self, other: Step) {
        self.outbound.extend(other.outbound);
        self.committed.extend(other.committed);
        self.outcomes.extend(other.outcomes);
    }
}

/// One proposal's progress at the current height.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub proposal: Option<Proposal>,
    /// Passed local verification and came from the elected node.
    pub valid: bool,
    pub responses: BTreeMap<NodeId, bool>,
    pub resolutions: BTreeMap<NodeId, AgreementMessage>,
    pub phase: ProposalState,
    /// Incremented on each timeout. Phases are monotone within an attempt.
    pub attempt: u32,
    pub history: Vec<(u32, ProposalState)>,
    created: Option<AgreementMessage>,
    my_response: Option<AgreementMessage>,
    my_resolution: Option<AgreementMessage>,
}

impl RoundState {
    fn new() -> Self {
        RoundState {
            proposal: None,
            valid: false,
            responses: BTreeMap::new(),
            resolutions: BTreeMap::new(),
            phase: ProposalState::Created,
            attempt: 0,
            history: vec![(0, ProposalState::Created)],
            created: None,
            my_response: None,
            my_resolution: None,
        }
    }

    pub fn accepts(&self) -> usize {
        self.responses.values().filter(|a| **a).count()
    }

    pub fn rejections(&self) -> usize {
        self.responses.values().filter(|a| !**a).count()
    }

    fn set_phase(&mut self, to: ProposalState) {
        debug_assert!(self.phase.can_advance_to(to), "{:?} -> {to:?}", self.phase);
        self.phase = to;
        self.history.push((self.attempt, to));
    }

    /// Returns false for a repeated vote.
    fn record(&mut self, msg: AgreementMessage) -> bool {
        match msg.kind {
            MessageKind::ProposalResponse => {
                if self.responses.contains_key(&msg.sender) {
                    return false;
                }
                self.responses.insert(msg.sender, msg.accept);
                true
            }
            MessageKind::ProposalResolution => {
                if self.resolutions.contains_key(&msg.sender) {
                    return false;
                }
                self.resolutions.insert(msg.sender, msg);
                true
            }
            MessageKind::ProposalCreated => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub id: NodeId,
    pub network: NetworkConfig,
    /// Minimum time between a commit and the next own proposal.
    pub proposal_delay: u64,
    pub max_block_txs: usize,
    pub max_pool: usize,
}

impl ReplicaConfig {
    pub fn new(id: NodeId, network: NetworkConfig) -> Self {
        ReplicaConfig {
            id,
            network,
            proposal_delay: 1,
            max_block_txs: 256,
            max_pool: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("malformed transaction: {0}")]
    Malformed(#[from] TxError),
    #[error("transaction pool is full")]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Queued,
    /// Already pooled or committed. Submission is idempotent by tx id.
    Known,
}

pub struct Replica {
    cfg: ReplicaConfig,
    keys: KeyPair,
    roster: Vec<PublicKey>,
    chain: Chain,
    state: LedgerState,
    committed_ids: BTreeSet<Digest>,
    committed_proposals: BTreeMap<Digest, BlockIndex>,
    pool: VecDeque<LedgerTx>,
    pool_ids: BTreeSet<Digest>,
    rounds: BTreeMap<Digest, RoundState>,
    locked: Option<Digest>,
    own_proposal: Option<Digest>,
    future: BTreeMap<BlockIndex, Vec<(NodeId, AgreementMessage)>>,
    orphans: BTreeMap<Digest, Vec<AgreementMessage>>,
    orphan_order: VecDeque<Digest>,
    orphan_count: usize,
    certificates: BTreeMap<BlockIndex, CommitCertificate>,
    last_commit_at: u64,
    round_deadline: u64,
    halted: Option<String>,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("id", &self.cfg.id)
            .field("height", &self.chain.height())
            .field("rounds", &self.rounds.len())
            .field("pool", &self.pool.len())
            .finish()
    }
}

impl Replica {
    /// `roster[i]` is the key of node `i + 1`. Balances are rebuilt by
    /// replaying `chain` on top of `genesis_balances`.
    pub fn new(
        cfg: ReplicaConfig,
        keys: KeyPair,
        roster: Vec<PublicKey>,
        chain: Chain,
        genesis_balances: impl IntoIterator<Item = (PublicKey, u64)>,
    ) -> Result<Self, AgreementError> {
        let n = cfg.network.n;
        if roster.len() != n {
            return Err(AgreementError::RosterSize { got: roster.len(), n });
        }
        let own = roster.get(cfg.id.index()).ok_or(AgreementError::NotInRoster(cfg.id))?;
        if *own != keys.public_key() {
            return Err(AgreementError::KeyMismatch(cfg.id));
        }
        let mut state = LedgerState::with_balances(genesis_balances);
        let mut committed_ids = BTreeSet::new();
        let mut committed_proposals = BTreeMap::new();
        for block in &chain.blocks()[1..] {
            state.apply_block(block.index(), &block.transactions);
            committed_ids.extend(block.transactions.iter().map(LedgerTx::id));
            committed_proposals.insert(block.header.proposal_hash, block.index());
        }
        Ok(Replica {
            cfg,
            keys,
            roster,
            chain,
            state,
            committed_ids,
            committed_proposals,
            pool: VecDeque::new(),
            pool_ids: BTreeSet::new(),
            rounds: BTreeMap::new(),
            locked: None,
            own_proposal: None,
            future: BTreeMap::new(),
            orphans: BTreeMap::new(),
            orphan_order: VecDeque::new(),
            orphan_count: 0,
            certificates: BTreeMap::new(),
            last_commit_at: 0,
            round_deadline: 0,
            halted: None,
        })
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    pub fn height(&self) -> BlockIndex {
        self.chain.height()
    }

    pub fn rounds(&self) -> &BTreeMap<Digest, RoundState> {
        &self.rounds
    }

    pub fn locked(&self) -> Option<Digest> {
        self.locked
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn certificate(&self, height: BlockIndex) -> Option<&CommitCertificate> {
        self.certificates.get(&height)
    }

    /// Set when appending a committed block failed; the replica then
    /// refuses all further input.
    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    pub fn sign(&self, kind: MessageKind, proposal_hash: Digest, accept: bool, payload: Option<Proposal>) -> AgreementMessage {
        AgreementMessage::signed(&self.keys, self.cfg.id, kind, proposal_hash, accept, payload)
    }

    /// Arms timers and asks peers for anything committed while this
    /// replica was down.
    pub fn start(&mut self, now: u64) -> Step {
        self.last_commit_at = now;
        self.round_deadline = now + self.cfg.network.round_timeout;
        let mut step = Step::default();
        if self.cfg.network.n > 1 {
            step.outbound.push(self.sync_request());
        }
        step
    }

    pub fn round_deadline(&self) -> u64 {
        self.round_deadline
    }

    /// Earliest time at which [`Replica::on_timer`] has work to do.
    pub fn next_deadline(&self) -> u64 {
        let mut at = self.round_deadline;
        if self.own_proposal.is_none() && self.elected() {
            at = at.min(self.last_commit_at + self.cfg.proposal_delay);
        }
        at
    }

    fn elected(&self) -> bool {
        is_my_turn(self.cfg.id, self.cfg.network.n, self.chain.height()).unwrap_or(false)
    }

    pub fn proposal_due(&self, now: u64) -> bool {
        self.halted.is_none()
            && self.own_proposal.is_none()
            && self.elected()
            && now >= self.last_commit_at + self.cfg.proposal_delay
    }

    /// A proposal for the next height from the head of the pool.
    pub fn build_proposal(&self, now: u64) -> Result<Proposal, ProposalError> {
        let txs = self.pool.iter().take(self.cfg.max_block_txs).cloned().collect();
        create_proposal(self.cfg.id, self.cfg.network.n, &self.chain, txs, now)
    }

    /// Adopts `proposal` as this node's own and broadcasts it.
    pub fn install_own_proposal(&mut self, proposal: Proposal, now: u64) -> Step {
        let mut step = Step::default();
        let hash = proposal.hash;
        let tip = CommittedTip::of_chain(&self.chain);
        let valid = pvf(&proposal, self.chain.height(), &tip).accepted;
        let created = self.sign(MessageKind::ProposalCreated, hash, true, Some(proposal.clone()));
        let me = self.cfg.id;
        let round = self.rounds.entry(hash).or_insert_with(RoundState::new);
        round.proposal = Some(proposal);
        round.created = Some(created.clone());
        round.valid = valid;
        round.responses.insert(me, true);
        if round.phase == ProposalState::Created {
            round.set_phase(ProposalState::Response);
        }
        if self.locked.is_none() {
            self.locked = Some(hash);
        }
        self.own_proposal = Some(hash);
        self.drain_orphans(hash);
        step.outbound.push(Outbound::all(created));
        self.progress(hash, now, &mut step);
        step
    }

    /// Queues a transaction for a future proposal.
    pub fn submit(&mut self, tx: LedgerTx) -> Result<(Digest, Admission), PoolError> {
        tx.check_structure()?;
        let id = tx.id();
        if self.pool_ids.contains(&id) || self.committed_ids.contains(&id) {
            return Ok((id, Admission::Known));
        }
        if self.pool.len() >= self.cfg.max_pool {
            return Err(PoolError::Full);
        }
        self.pool_ids.insert(id);
        self.pool.push_back(tx);
        Ok((id, Admission::Queued))
    }

    pub fn handle(&mut self, from: NodeId, msg: ReplicaMessage, now: u64) -> Step {
        let mut step = Step::default();
        step.disposition = if self.halted.is_some() {
            Disposition::Dropped(DropReason::Halted)
        } else {
            match msg {
                ReplicaMessage::Agreement(m) => self.on_agreement(from, m, now, &mut step),
                ReplicaMessage::SyncRequest { from_height } => self.on_sync_request(from, from_height, &mut step),
                ReplicaMessage::SyncResponse { certificates } => self.on_sync_response(certificates, now, &mut step),
                ReplicaMessage::Transaction(tx) => match self.submit(tx) {
                    Ok((_, Admission::Queued)) => Disposition::Recorded,
                    Ok((_, Admission::Known)) => Disposition::Dropped(DropReason::Duplicate),
                    Err(PoolError::Full) => Disposition::Dropped(DropReason::BufferFull),
                    Err(PoolError::Malformed(_)) => Disposition::Dropped(DropReason::Malformed),
                },
            }
        };
        step
    }

    /// Proposes when due and handles round expiry.
    pub fn on_timer(&mut self, now: u64) -> Step {
        let mut step = Step::default();
        if self.halted.is_some() {
            return step;
        }
        if self.proposal_due(now) {
            match self.build_proposal(now) {
                Ok(p) => {
                    let s = self.install_own_proposal(p, now);
                    step.absorb(s);
                }
                Err(e) => log::warn!("node {}: cannot propose: {e}", self.cfg.id),
            }
        }
        if now >= self.round_deadline {
            self.on_timeout(now, &mut step);
        }
        step
    }

    fn sync_request(&self) -> Outbound {
        Outbound {
            to: Destination::All,
            msg: ReplicaMessage::SyncRequest {
                from_height: self.chain.height() + 1,
            },
        }
    }

    fn max_rounds(&self) -> usize {
        4 * self.cfg.network.n + 4
    }

    fn on_agreement(&mut self, from: NodeId, m: AgreementMessage, now: u64, step: &mut Step) -> Disposition {
        let Some(key) = self.roster.get(m.sender.index()) else {
            return Disposition::Dropped(DropReason::UnknownSender);
        };
        if !m.verify(key) {
            return Disposition::Dropped(DropReason::BadSignature);
        }
        match m.kind {
            MessageKind::ProposalCreated => self.on_created(from, m, now, step),
            MessageKind::ProposalResponse | MessageKind::ProposalResolution => self.on_vote(m, now, step),
        }
    }

    fn on_created(&mut self, from: NodeId, m: AgreementMessage, now: u64, step: &mut Step) -> Disposition {
        let Some(proposal) = m.payload.clone() else {
            return Disposition::Dropped(DropReason::Malformed);
        };
        let local = self.chain.height();
        let height = proposal.height();
        if height <= local {
            return Disposition::Dropped(DropReason::Stale);
        }
        if height > local + 1 {
            let buffered: usize = self.future.values().map(Vec::len).sum();
            if buffered >= MAX_FUTURE_PROPOSALS {
                return Disposition::Dropped(DropReason::BufferFull);
            }
            self.future.entry(height).or_default().push((from, m));
            step.outbound.push(Outbound {
                to: Destination::To(from),
                msg: ReplicaMessage::SyncRequest { from_height: local + 1 },
            });
            return Disposition::Buffered;
        }
        let hash = m.proposal_hash;
        match self.rounds.get(&hash) {
            Some(r) if r.proposal.is_some() => return Disposition::Dropped(DropReason::Duplicate),
            None if self.rounds.len() >= self.max_rounds() => return Disposition::Dropped(DropReason::BufferFull),
            _ => {}
        }

        let tip = CommittedTip::of_chain(&self.chain);
        let elected = pce(self.cfg.network.n, local).ok() == Some(m.sender) && proposal.proposer == m.sender;
        let valid = elected && proposal.hash == hash && pvf(&proposal, local, &tip).accepted;
        let accept = valid
            && match self.locked {
                None => {
                    self.locked = Some(hash);
                    true
                }
                Some(l) => l == hash,
            };
        let me = self.cfg.id;
        let response = self.sign(MessageKind::ProposalResponse, hash, accept, None);
        let round = self.rounds.entry(hash).or_insert_with(RoundState::new);
        round.proposal = Some(proposal);
        round.valid = valid;
        if valid {
            round.responses.insert(m.sender, true);
        }
        round.created = Some(m);
        round.responses.insert(me, accept);
        round.my_response = Some(response.clone());
        round.set_phase(ProposalState::Response);
        self.drain_orphans(hash);
        step.outbound.push(Outbound::all(response));
        let before = step.committed.len();
        self.progress(hash, now, step);
        if step.committed.len() > before {
            Disposition::Committed
        } else {
            Disposition::Responded
        }
    }

    fn on_vote(&mut self, m: AgreementMessage, now: u64, step: &mut Step) -> Disposition {
        let hash = m.proposal_hash;
        if self.committed_proposals.contains_key(&hash) {
            return Disposition::Dropped(DropReason::Stale);
        }
        let Some(round) = self.rounds.get_mut(&hash) else {
            return self.buffer_orphan(m);
        };
        if !round.record(m) {
            return Disposition::Dropped(DropReason::Duplicate);
        }
        let (sent, committed) = (step.outbound.len(), step.committed.len());
        self.progress(hash, now, step);
        if step.committed.len() > committed {
            Disposition::Committed
        } else if step.outbound.len() > sent {
            Disposition::Responded
        } else {
            Disposition::Recorded
        }
    }

    fn buffer_orphan(&mut self, m: AgreementMessage) -> Disposition {
        let hash = m.proposal_hash;
        let queue = self.orphans.entry(hash).or_default();
        if queue.iter().any(|o| o.kind == m.kind && o.sender == m.sender) {
            return Disposition::Dropped(DropReason::Duplicate);
        }
        queue.push(m);
        self.orphan_order.push_back(hash);
        self.orphan_count += 1;
        while self.orphan_count > MAX_ORPHAN_VOTES {
            let Some(oldest) = self.orphan_order.pop_front() else { break };
            if let Some(q) = self.orphans.get_mut(&oldest) {
                if !q.is_empty() {
                    q.remove(0);
                    self.orphan_count -= 1;
                }
                if q.is_empty() {
                    self.orphans.remove(&oldest);
                }
            }
        }
        Disposition::Buffered
    }

    fn drain_orphans(&mut self, hash: Digest) {
        let Some(votes) = self.orphans.remove(&hash) else { return };
        self.orphan_count -= votes.len();
        self.orphan_order.retain(|h| *h != hash);
        if let Some(round) = self.rounds.get_mut(&hash) {
            for v in votes {
                round.record(v);
            }
        }
    }

    /// Applies quorum rules to one round.
    fn progress(&mut self, hash: Digest, now: u64, step: &mut Step) {
        let net = self.cfg.network;
        let me = self.cfg.id;
        let Some(round) = self.rounds.get_mut(&hash) else { return };
        if round.phase == ProposalState::Response {
            if round.valid && round.responses.get(&me) == Some(&true) && round.accepts() >= net.response_quorum {
                let resolution = AgreementMessage::signed(&self.keys, me, MessageKind::ProposalResolution, hash, true, None);
                round.resolutions.insert(me, resolution.clone());
                round.my_resolution = Some(resolution.clone());
                round.set_phase(ProposalState::Resolution);
                step.outbound.push(Outbound::all(resolution));
            } else if round.rejections() > net.max_rejections() {
                round.set_phase(ProposalState::Rejected);
            }
        }
        if round.valid && round.proposal.is_some() && round.resolutions.len() >= net.resolution_quorum {
            let mut round = self.rounds.remove(&hash).expect("round present");
            round.phase = ProposalState::Committed;
            round.history.push((round.attempt, ProposalState::Committed));
            let cert = CommitCertificate {
                created: round.created.take().expect("valid round has its creation message"),
                resolutions: round.resolutions.into_values().collect(),
            };
            let proposal = round.proposal.expect("checked above");
            self.commit(proposal, cert, now, step);
        }
    }

    fn commit(&mut self, proposal: Proposal, cert: CommitCertificate, now: u64, step: &mut Step) -> bool {
        let block = proposal.committed_block();
        if let Err(e) = self.chain.append(block.clone()) {
            log::error!("node {}: halting, cannot append block {}: {e}", self.cfg.id, block.index());
            self.halted = Some(e.to_string());
            return false;
        }
        let height = block.index();
        step.outcomes.extend(self.state.apply_block(height, &block.transactions));
        for tx in &block.transactions {
            let id = tx.id();
            self.committed_ids.insert(id);
            self.pool_ids.remove(&id);
        }
        let committed = &self.committed_ids;
        self.pool.retain(|tx| !committed.contains(&tx.id()));
        self.committed_proposals.insert(proposal.hash, height);
        self.certificates.insert(height, cert);
        if height > CERTIFICATE_RETENTION {
            self.certificates = self.certificates.split_off(&(height - CERTIFICATE_RETENTION));
        }
        self.rounds.clear();
        self.locked = None;
        self.own_proposal = None;
        self.last_commit_at = now;
        self.round_deadline = now + self.cfg.network.round_timeout;
        step.committed.push(block);

        let later = self.future.split_off(&(height + 2));
        let ready = std::mem::replace(&mut self.future, later).remove(&(height + 1)).unwrap_or_default();
        for (from, msg) in ready {
            self.on_created(from, msg, now, step);
        }
        true
    }

    fn on_timeout(&mut self, now: u64, step: &mut Step) {
        log::debug!("node {}: round timeout at height {}", self.cfg.id, self.chain.height() + 1);
        let mut resend = Vec::new();
        if let Some(created) = self.own_proposal.and_then(|h| self.rounds.get(&h)).and_then(|r| r.created.clone()) {
            resend.push(created);
        }
        for round in self.rounds.values_mut() {
            if round.phase != ProposalState::Rejected {
                round.set_phase(ProposalState::Rejected);
            }
            // A fresh attempt keeps the votes already gathered.
            round.attempt += 1;
            round.phase = ProposalState::Created;
            round.history.push((round.attempt, ProposalState::Created));
            if round.proposal.is_some() {
                round.set_phase(ProposalState::Response);
                if round.my_resolution.is_some() {
                    round.set_phase(ProposalState::Resolution);
                }
            }
            resend.extend(round.my_response.clone());
            resend.extend(round.my_resolution.clone());
        }
        let hashes: Vec<Digest> = self.rounds.keys().copied().collect();
        for h in hashes {
            self.progress(h, now, step);
        }
        step.outbound.extend(resend.into_iter().map(Outbound::all));
        if self.cfg.network.n > 1 {
            step.outbound.push(self.sync_request());
        }
        self.round_deadline = now + self.cfg.network.round_timeout;
    }

    fn on_sync_request(&mut self, from: NodeId, from_height: BlockIndex, step: &mut Step) -> Disposition {
        let certificates = self
            .certificates
            .range(from_height..)
            .take(MAX_SYNC_BATCH)
            .map(|(_, c)| c.clone())
            .collect();
        step.outbound.push(Outbound {
            to: Destination::To(from),
            msg: ReplicaMessage::SyncResponse { certificates },
        });
        Disposition::Responded
    }

    fn on_sync_response(&mut self, mut certificates: Vec<CommitCertificate>, now: u64, step: &mut Step) -> Disposition {
        certificates.sort_by_key(|c| c.height());
        let mut committed = false;
        for cert in certificates {
            let local = self.chain.height();
            match cert.height() {
                Some(h) if h <= local => continue,
                Some(h) if h == local + 1 => {}
                _ => break,
            }
            let tip = CommittedTip::of_chain(&self.chain);
            if let Err(e) = cert.verify(&self.cfg.network, &self.roster, &tip) {
                log::warn!("node {}: rejecting certificate: {e}", self.cfg.id);
                return Disposition::Dropped(DropReason::InvalidCertificate);
            }
            let proposal = cert.created.payload.clone().expect("verified certificate has a payload");
            if !self.commit(proposal, cert, now, step) {
                break;
            }
            committed = true;
        }
        if committed {
            Disposition::Committed
        } else {
            Disposition::Recorded
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Net {
        replicas: Vec<Replica>,
    }

    fn keys(i: usize) -> KeyPair {
        KeyPair::from_seed(format!("agreement-test-node-{i}").as_bytes()).unwrap()
    }

    fn node(i: u32) -> NodeId {
        NodeId::new(i).unwrap()
    }

    impl Net {
        fn new(n: usize) -> Net {
            let network = NetworkConfig::new(n, 100).unwrap();
            let roster: Vec<PublicKey> = (0..n).map(|i| keys(i).public_key()).collect();
            let replicas = (0..n)
                .map(|i| {
                    Replica::new(
                        ReplicaConfig::new(NodeId::from_index(i), network),
                        keys(i),
                        roster.clone(),
                        Chain::new(),
                        Vec::new(),
                    )
                    .unwrap()
                })
                .collect::<Vec<Replica>>();
            let mut net = Net { replicas };
            for r in net.replicas.iter_mut() {
                r.start(0);
            }
            net
        }

        /// Delivers messages FIFO until quiet, skipping nodes in `down`.
        fn run(&mut self, mut queue: VecDeque<(NodeId, Outbound)>, down: &[NodeId]) {
            while let Some((from, out)) = queue.pop_front() {
                let targets: Vec<NodeId> = match out.to {
                    Destination::All => (0..self.replicas.len()).map(NodeId::from_index).filter(|t| *t != from).collect(),
                    Destination::To(t) => vec![t],
                };
                for t in targets {
                    if down.contains(&t) {
                        continue;
                    }
                    let step = self.replicas[t.index()].handle(from, out.msg.clone(), 0);
                    queue.extend(step.outbound.into_iter().map(|o| (t, o)));
                }
            }
        }

        fn tick(&mut self, now: u64, down: &[NodeId]) {
            let mut queue = VecDeque::new();
            for r in self.replicas.iter_mut() {
                if down.contains(&r.id()) {
                    continue;
                }
                let id = r.id();
                queue.extend(r.on_timer(now).outbound.into_iter().map(|o| (id, o)));
            }
            self.run(queue, down);
        }
    }

    #[test]
    fn quorum_sizes() {
        let q = |n| NetworkConfig::new(n, 1).unwrap();
        assert_eq!((q(1).f, q(1).response_quorum), (0, 1));
        assert_eq!((q(2).f, q(2).response_quorum), (0, 1));
        assert_eq!((q(4).f, q(4).response_quorum, q(4).max_rejections()), (1, 3, 1));
        assert_eq!((q(7).f, q(7).resolution_quorum), (2, 5));
        assert!(NetworkConfig::new(0, 1).is_err());
        assert!(NetworkConfig::new(3, 0).is_err());
    }

    #[test]
    fn message_signatures() {
        let k = keys(0);
        let m = AgreementMessage::signed(&k, node(1), MessageKind::ProposalResponse, Digest::ZERO, true, None);
        assert!(m.verify(&k.public_key()));
        let mut flipped = m.clone();
        flipped.accept = false;
        assert!(!flipped.verify(&k.public_key()));
        assert!(!m.verify(&keys(1).public_key()));
    }

    #[test]
    fn single_node_commits_alone() {
        let mut net = Net::new(1);
        for t in 1..=5 {
            net.tick(t, &[]);
        }
        assert_eq!(net.replicas[0].height(), 5);
    }

    #[test]
    fn four_nodes_commit_identical_blocks() {
        let mut net = Net::new(4);
        for t in 1..=10 {
            net.tick(t, &[]);
        }
        let tip = net.replicas[0].chain().tip().hash;
        assert_eq!(net.replicas[0].height(), 10);
        for r in &net.replicas {
            assert_eq!(r.chain().tip().hash, tip);
            assert!(r.chain().validate().is_valid());
        }
        // Committers follow the rotation.
        for b in &net.replicas[0].chain().blocks()[1..] {
            assert_eq!(b.header.committer, pce(4, b.index() - 1).unwrap());
        }
    }

    #[test]
    fn crashed_non_proposer_does_not_block() {
        let mut net = Net::new(4);
        let down = [node(4)];
        for t in 1..=12 {
            net.tick(t, &down);
        }
        // Height 3 is node 4's turn, so progress stops at 2.
        assert_eq!(net.replicas[0].height(), 2);
        assert_eq!(net.replicas[3].height(), 0);
    }

    #[test]
    fn created_handling() {
        let mut net = Net::new(4);
        let p = net.replicas[1].build_proposal(1).unwrap();
        let step = net.replicas[1].install_own_proposal(p.clone(), 1);
        let created = match &step.outbound[0].msg {
            ReplicaMessage::Agreement(m) => m.clone(),
            _ => panic!(),
        };
        let r = &mut net.replicas[0];
        let s = r.handle(node(2), ReplicaMessage::Agreement(created.clone()), 1);
        assert_eq!(s.disposition, Disposition::Responded);
        match &s.outbound[0].msg {
            ReplicaMessage::Agreement(m) => {
                assert_eq!(m.kind, MessageKind::ProposalResponse);
                assert!(m.accept);
            }
            _ => panic!(),
        }
        let again = r.handle(node(2), ReplicaMessage::Agreement(created.clone()), 1);
        assert_eq!(again.disposition, Disposition::Dropped(DropReason::Duplicate));
        assert!(again.outbound.is_empty());

        // Same height, signed by a node that is not elected.
        let mut forged = p.clone();
        forged.proposer = node(3);
        forged.hash = forged.compute_hash();
        let m = net.replicas[2].sign(MessageKind::ProposalCreated, forged.hash, true, Some(forged));
        let s = net.replicas[3].handle(node(3), ReplicaMessage::Agreement(m), 1);
        match &s.outbound[0].msg {
            ReplicaMessage::Agreement(m) => assert!(!m.accept),
            _ => panic!(),
        }
        assert_eq!(net.replicas[3].locked(), None);

        let mut bad_sig = created;
        bad_sig.sender = node(3);
        let s = net.replicas[3].handle(node(3), ReplicaMessage::Agreement(bad_sig), 1);
        assert_eq!(s.disposition, Disposition::Dropped(DropReason::BadSignature));
    }

    #[test]
    fn response_and_resolution_thresholds() {
        let mut net = Net::new(4);
        let p = net.replicas[1].build_proposal(1).unwrap();
        let hash = p.hash;
        let created = net.replicas[1].sign(MessageKind::ProposalCreated, hash, true, Some(p));
        let vote = |net: &Net, i: usize, kind, accept| net.replicas[i].sign(kind, hash, accept, None);

        let r0 = Replica::new(
            ReplicaConfig::new(node(1), NetworkConfig::new(4, 100).unwrap()),
            keys(0),
            (0..4).map(|i| keys(i).public_key()).collect(),
            Chain::new(),
            Vec::new(),
        )
        .unwrap();
        net.replicas[0] = r0;
        net.replicas[0].handle(node(2), ReplicaMessage::Agreement(created.clone()), 1);
        // Proposer plus self: 2 accepts, quorum is 3.
        assert_eq!(net.replicas[0].rounds()[&hash].phase, ProposalState::Response);
        let v = vote(&net, 2, MessageKind::ProposalResponse, true);
        let s = net.replicas[0].handle(node(3), ReplicaMessage::Agreement(v.clone()), 1);
        assert_eq!(s.disposition, Disposition::Responded);
        assert_eq!(net.replicas[0].rounds()[&hash].phase, ProposalState::Resolution);
        let dup = net.replicas[0].handle(node(3), ReplicaMessage::Agreement(v), 1);
        assert_eq!(dup.disposition, Disposition::Dropped(DropReason::Duplicate));

        let r2 = vote(&net, 2, MessageKind::ProposalResolution, true);
        let s = net.replicas[0].handle(node(3), ReplicaMessage::Agreement(r2), 1);
        assert_eq!(s.disposition, Disposition::Recorded);
        let r1 = vote(&net, 1, MessageKind::ProposalResolution, true);
        let s = net.replicas[0].handle(node(2), ReplicaMessage::Agreement(r1), 1);
        assert_eq!(s.disposition, Disposition::Committed);
        assert_eq!(s.committed.len(), 1);
        assert_eq!(net.replicas[0].height(), 1);
        let late = vote(&net, 3, MessageKind::ProposalResolution, true);
        let s = net.replicas[0].handle(node(4), ReplicaMessage::Agreement(late), 1);
        assert_eq!(s.disposition, Disposition::Dropped(DropReason::Stale));
        assert!(s.committed.is_empty());
    }

    #[test]
    fn two_rejections_reject_round() {
        let mut net = Net::new(4);
        let p = net.replicas[1].build_proposal(1).unwrap();
        let hash = p.hash;
        let created = net.replicas[1].sign(MessageKind::ProposalCreated, hash, true, Some(p));
        net.replicas[0].handle(node(2), ReplicaMessage::Agreement(created), 1);
        for i in [2usize, 3] {
            let v = net.replicas[i].sign(MessageKind::ProposalResponse, hash, false, None);
            net.replicas[0].handle(NodeId::from_index(i), ReplicaMessage::Agreement(v), 1);
        }
        assert_eq!(net.replicas[0].rounds()[&hash].phase, ProposalState::Rejected);
    }

    #[test]
    fn votes_before_proposal_are_buffered() {
        let mut net = Net::new(4);
        let p = net.replicas[1].build_proposal(1).unwrap();
        let hash = p.hash;
        let created = net.replicas[1].sign(MessageKind::ProposalCreated, hash, true, Some(p));
        let mut msgs = Vec::new();
        for i in [2usize, 3] {
            msgs.push(net.replicas[i].sign(MessageKind::ProposalResponse, hash, true, None));
            msgs.push(net.replicas[i].sign(MessageKind::ProposalResolution, hash, true, None));
        }
        for m in msgs {
            let s = net.replicas[0].handle(m.sender, ReplicaMessage::Agreement(m), 1);
            assert_eq!(s.disposition, Disposition::Buffered);
        }
        let s = net.replicas[0].handle(node(2), ReplicaMessage::Agreement(created), 1);
        // Own resolution completes the quorum of three.
        assert_eq!(s.disposition, Disposition::Committed);
    }

    #[test]
    fn crashed_proposer_times_out_without_commit() {
        let mut net = Net::new(4);
        let down = [node(2)];
        let mut queue = VecDeque::new();
        for r in net.replicas.iter_mut() {
            let id = r.id();
            queue.extend(r.start(0).outbound.into_iter().map(|o| (id, o)));
        }
        net.run(queue, &down);
        for t in [50, 150, 250] {
            net.tick(t, &down);
        }
        for r in &net.replicas {
            assert_eq!(r.height(), 0);
        }
    }

    #[test]
    fn lagging_node_catches_up_with_certificates() {
        let mut net = Net::new(4);
        let down = [node(4)];
        // Node 4 proposes height 3, so the others stop at 2.
        for t in 1..=5 {
            net.tick(t, &down);
        }
        assert_eq!(net.replicas[3].height(), 0);
        let req = net.replicas[3].start(10);
        let mut queue: VecDeque<_> = req.outbound.into_iter().map(|o| (node(4), o)).collect();
        let none: [NodeId; 0] = [];
        net.run(std::mem::take(&mut queue), &none);
        assert_eq!(net.replicas[3].height(), 2);
        assert_eq!(net.replicas[3].chain().tip().hash, net.replicas[0].chain().tip().hash);
        for t in 11..=15 {
            net.tick(t, &none);
        }
        assert_eq!(net.replicas[0].height(), 7);
        assert_eq!(net.replicas[3].chain().tip().hash, net.replicas[0].chain().tip().hash);
    }

    #[test]
    fn tampered_certificate_is_rejected() {
        let mut net = Net::new(4);
        net.tick(1, &[]);
        let mut cert = net.replicas[0].certificate(1).unwrap().clone();
        let network = NetworkConfig::new(4, 100).unwrap();
        let roster: Vec<PublicKey> = (0..4).map(|i| keys(i).public_key()).collect();
        let tip = CommittedTip::of(&crate::ledger::genesis());
        cert.verify(&network, &roster, &tip).unwrap();
        cert.resolutions.truncate(2);
        assert_eq!(
            cert.verify(&network, &roster, &tip),
            Err(CertificateError::InsufficientQuorum { got: 2, need: 3 })
        );
        let mut dup = net.replicas[0].certificate(1).unwrap().clone();
        dup.resolutions[1] = dup.resolutions[0].clone();
        assert!(matches!(dup.verify(&network, &roster, &tip), Err(CertificateError::DuplicateSigner(_))));
    }

    #[test]
    fn pool_is_idempotent() {
        use crate::transactions::SealedTransaction;
        let mut net = Net::new(1);
        let tx = LedgerTx::Sealed(SealedTransaction {
            tx_id: crate::crypto::hash(b"t"),
            recipient_hint: Digest::ZERO,
            ciphertext: vec![1],
        });
        let r = &mut net.replicas[0];
        assert_eq!(r.submit(tx.clone()).unwrap().1, Admission::Queued);
        assert_eq!(r.submit(tx.clone()).unwrap().1, Admission::Known);
        net.tick(1, &[]);
        let r = &mut net.replicas[0];
        assert_eq!(r.chain().tip().transactions, vec![tx.clone()]);
        assert_eq!(r.pool_len(), 0);
        assert_eq!(r.submit(tx).unwrap().1, Admission::Known);
        net.tick(2, &[]);
        assert!(net.replicas[0].chain().tip().transactions.is_empty());
    }

    #[test]
    fn message_json_round_trip() {
        let mut net = Net::new(2);
        let p = net.replicas[1].build_proposal(1).unwrap();
        let m = ReplicaMessage::Agreement(net.replicas[1].sign(MessageKind::ProposalCreated, p.hash, true, Some(p)));
        let json = serde_json::to_string(&m).unwrap();
        let back: ReplicaMessage = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        net.replicas[0].handle(node(2), back, 1);
        assert_eq!(net.replicas[0].height(), 1);
    }
}
