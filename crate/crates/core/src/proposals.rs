//! Proposals, proposer election and proposal verification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, BlockIndex, Digest, NodeId};
use crate::encoding::{Canonical, Encoder};
use crate::ledger::{produce_block, Block, Chain};
use crate::transactions::LedgerTx;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProposalError {
    #[error("network has no nodes")]
    EmptyNetwork,
    #[error("node {node} is outside 1..={n}")]
    OutOfRange { node: NodeId, n: usize },
    #[error("node {node} is not elected at height {height} (expected {elected})")]
    NotElected {
        node: NodeId,
        height: BlockIndex,
        elected: NodeId,
    },
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: ProposalState, to: ProposalState },
}

/// Proposer for the block after `current_height`: `((h + 1) mod n) + 1`.
pub fn pce(n_count: usize, current_height: BlockIndex) -> Result<NodeId, ProposalError> {
    if n_count == 0 {
        return Err(ProposalError::EmptyNetwork);
    }
    let slot = (current_height + 1) % n_count as u64;
    Ok(NodeId::from_index(slot as usize))
}

pub fn is_my_turn(me: NodeId, n_count: usize, current_height: BlockIndex) -> Result<bool, ProposalError> {
    if me.index() >= n_count {
        return Err(ProposalError::OutOfRange { node: me, n: n_count });
    }
    Ok(pce(n_count, current_height)? == me)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalState {
    Created,
    Response,
    Resolution,
    Committed,
    Rejected,
}

impl ProposalState {
    fn rank(self) -> Option<u8> {
        match self {
            ProposalState::Created => Some(0),
            ProposalState::Response => Some(1),
            ProposalState::Resolution => Some(2),
            ProposalState::Committed => Some(3),
            ProposalState::Rejected => None,
        }
    }

    /// Forward along Created → Response → Resolution → Committed, or from a
    /// live state into Rejected.
    pub fn can_advance_to(self, to: ProposalState) -> bool {
        match (self.rank(), to.rank()) {
            (Some(a), Some(b)) => b == a + 1,
            (Some(3), None) => false,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }

    pub fn advance(&mut self, to: ProposalState) -> Result<(), ProposalError> {
        if !self.can_advance_to(to) {
            return Err(ProposalError::IllegalTransition { from: *self, to });
        }
        *self = to;
        Ok(())
    }
}

/// A proposed next block plus its agreement metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub proposal_id: u64,
    pub proposer: NodeId,
    /// The proposed block, with `proposal_hash` still zero.
    pub block: Block,
    pub parent_proposal_hash: Digest,
    pub hash: Digest,
    pub state: ProposalState,
}

impl Canonical for Proposal {
    /// Everything except `hash` and `state`.
    fn encode(&self, enc: &mut Encoder) {
        enc.str("aos/proposal/v1")
            .u64(self.proposal_id)
            .u32(self.proposer.get())
            .digest(&self.parent_proposal_hash);
        self.block.header.encode(enc);
        enc.digest(&self.block.hash);
    }
}

impl Proposal {
    pub fn compute_hash(&self) -> Digest {
        hash(&self.canonical_bytes())
    }

    pub fn height(&self) -> BlockIndex {
        self.block.index()
    }

    /// The block as it is committed: `proposal_hash` stamped in.
    pub fn committed_block(&self) -> Block {
        self.block.stamped(self.hash)
    }
}

/// What a node knows about its last committed block, which is all proposal
/// verification needs. Committed proposals are one per height, so the
/// proposal id of the tip equals its height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommittedTip {
    pub height: BlockIndex,
    pub block_hash: Digest,
    pub proposal_id: u64,
    pub proposal_hash: Digest,
}

impl CommittedTip {
    pub fn of(block: &Block) -> Self {
        CommittedTip {
            height: block.index(),
            block_hash: block.hash,
            proposal_id: block.index(),
            proposal_hash: block.header.proposal_hash,
        }
    }

    pub fn of_chain(chain: &Chain) -> Self {
        Self::of(chain.tip())
    }
}

/// Builds this node's proposal for the next height.
pub fn create_proposal(
    me: NodeId,
    n_count: usize,
    chain: &Chain,
    pending_txs: Vec<LedgerTx>,
    now: u64,
) -> Result<Proposal, ProposalError> {
    let height = chain.height();
    if !is_my_turn(me, n_count, height)? {
        return Err(ProposalError::NotElected {
            node: me,
            height,
            elected: pce(n_count, height)?,
        });
    }
    let tip = CommittedTip::of_chain(chain);
    let mut proposal = Proposal {
        proposal_id: tip.proposal_id + 1,
        proposer: me,
        block: produce_block(chain.tip(), pending_txs, me, now),
        parent_proposal_hash: tip.proposal_hash,
        hash: Digest::ZERO,
        state: ProposalState::Created,
    };
    proposal.hash = proposal.compute_hash();
    Ok(proposal)
}

/// Valid next block index.
pub fn vnbi(proposal: &Proposal, local_height: BlockIndex) -> bool {
    proposal.block.index() == local_height + 1
}

/// Valid proposal hash: the hash recomputes, the block is internally
/// consistent, and both the proposal and its block extend the local tip.
pub fn vph(proposal: &Proposal, tip: &CommittedTip) -> bool {
    proposal.hash == proposal.compute_hash()
        && proposal.block.header.proposal_hash == Digest::ZERO
        && proposal.block.is_self_consistent()
        && proposal.parent_proposal_hash == tip.proposal_hash
        && proposal.proposal_id == tip.proposal_id + 1
        && proposal.block.header.parent_hash == tip.block_hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Ok,
    BadIndex,
    BadHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub reason: VerdictReason,
}

impl Verdict {
    /// Index is checked before hash.
    pub fn from_predicates(valid_index: bool, valid_hash: bool) -> Verdict {
        let reason = if !valid_index {
            VerdictReason::BadIndex
        } else if !valid_hash {
            VerdictReason::BadHash
        } else {
            VerdictReason::Ok
        };
        Verdict {
            accepted: valid_index && valid_hash,
            reason,
        }
    }
}

/// `VNBI ∧ VPH`
pub fn pvf(proposal: &Proposal, local_height: BlockIndex, tip: &CommittedTip) -> Verdict {
    Verdict::from_predicates(vnbi(proposal, local_height), vph(proposal, tip))
}

/// Acceptance computed from predicates that test for invalidity:
/// `¬(invalid_index ∨ invalid_hash)`.
pub fn pvf_from_invalidity(invalid_index: bool, invalid_hash: bool) -> bool {
    !(invalid_index || invalid_hash)
}
