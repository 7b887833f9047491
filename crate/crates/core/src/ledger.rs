//! Blocks, block production and the append-only chain.
//!
//! A block's hash is SHA-256 over its canonical header bytes; the header
//! commits to the parent hash, the carrying proposal's hash and a flat root
//! over the transaction list. The on-disk form is `chain.jsonl`, one block
//! per line.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, BlockIndex, Digest, NodeId};
use crate::encoding::{Canonical, Encoder};
use crate::transactions::LedgerTx;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("block {index} does not link to the tip")]
    LinkMismatch { index: BlockIndex },
    #[error("expected block index {expected}, got {got}")]
    IndexGap { expected: BlockIndex, got: BlockIndex },
    #[error("block {index} hash does not match its header")]
    HashMismatch { index: BlockIndex },
    #[error("block {index} tx_root does not match its transactions")]
    TxRootMismatch { index: BlockIndex },
    #[error("chain file {0} already exists")]
    AlreadyExists(PathBuf),
    #[error("chain file is invalid at block {0}")]
    Corrupt(BlockIndex),
    #[error("chain file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub index: BlockIndex,
    pub parent_hash: Digest,
    pub proposal_hash: Digest,
    pub committer: NodeId,
    /// Committer-local milliseconds (or simulator ticks). Not validated.
    pub timestamp: u64,
    pub tx_root: Digest,
}

impl Canonical for BlockHeader {
    fn encode(&self, enc: &mut Encoder) {
        enc.str("aos/block/v1")
            .u64(self.index)
            .digest(&self.parent_hash)
            .digest(&self.proposal_hash)
            .u32(self.committer.get())
            .u64(self.timestamp)
            .digest(&self.tx_root);
    }
}

impl BlockHeader {
    pub fn hash(&self) -> Digest {
        hash(&self.canonical_bytes())
    }
}

/// `hash("aos/txroot/v1" ‖ count ‖ hash(tx_0) ‖ … )`
pub fn tx_root(txs: &[LedgerTx]) -> Digest {
    let mut enc = Encoder::tagged("aos/txroot/v1");
    enc.list(txs, |e, tx| {
        e.digest(&hash(&tx.canonical_bytes()));
    });
    hash(enc.as_slice())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    #[serde(flatten)]
    pub header: BlockHeader,
    pub hash: Digest,
    pub transactions: Vec<LedgerTx>,
}

impl Block {
    fn from_parts(header: BlockHeader, transactions: Vec<LedgerTx>) -> Block {
        Block {
            hash: header.hash(),
            header,
            transactions,
        }
    }

    pub fn index(&self) -> BlockIndex {
        self.header.index
    }

    /// Copy with `proposal_hash` set and the hash recomputed.
    pub fn stamped(&self, proposal_hash: Digest) -> Block {
        let mut header = self.header.clone();
        header.proposal_hash = proposal_hash;
        Block::from_parts(header, self.transactions.clone())
    }

    /// Recomputed hash and tx root both match the stored values.
    pub fn is_self_consistent(&self) -> bool {
        self.header.hash() == self.hash && tx_root(&self.transactions) == self.header.tx_root
    }
}

/// The fixed genesis block: index 0, parent `hash("")`, no transactions,
/// committed by node 1 at time 0. It carries no proposal; its
/// `proposal_hash` is `hash("")` as well.
pub fn genesis() -> Block {
    let empty = hash(b"");
    Block::from_parts(
        BlockHeader {
            index: 0,
            parent_hash: empty,
            proposal_hash: empty,
            committer: NodeId::from_index(0),
            timestamp: 0,
            tx_root: tx_root(&[]),
        },
        Vec::new(),
    )
}

/// Builds the child of `parent`. `proposal_hash` is left zero until the
/// carrying proposal is committed (see [`Block::stamped`]).
pub fn produce_block(parent: &Block, txs: Vec<LedgerTx>, committer: NodeId, timestamp: u64) -> Block {
    Block::from_parts(
        BlockHeader {
            index: parent.index() + 1,
            parent_hash: parent.hash,
            proposal_hash: Digest::ZERO,
            committer,
            timestamp,
            tx_root: tx_root(&txs),
        },
        txs,
    )
}

/// Checks that `block` can follow `tip`.
pub fn validate_link(tip: &Block, block: &Block) -> Result<(), LedgerError> {
    let expected = tip.index() + 1;
    if block.index() != expected {
        return Err(LedgerError::IndexGap {
            expected,
            got: block.index(),
        });
    }
    if block.header.parent_hash != tip.hash {
        return Err(LedgerError::LinkMismatch { index: block.index() });
    }
    if block.header.hash() != block.hash {
        return Err(LedgerError::HashMismatch { index: block.index() });
    }
    if tx_root(&block.transactions) != block.header.tx_root {
        return Err(LedgerError::TxRootMismatch { index: block.index() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainValidity {
    Valid,
    Invalid { first_bad_index: BlockIndex },
}

impl ChainValidity {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainValidity::Valid)
    }
}

/// Full re-hash walk from genesis.
pub fn validate_chain(blocks: &[Block]) -> ChainValidity {
    let bad = |i: usize| ChainValidity::Invalid {
        first_bad_index: i as BlockIndex,
    };
    let Some(first) = blocks.first() else {
        return bad(0);
    };
    if *first != genesis() {
        return bad(0);
    }
    for (i, pair) in blocks.windows(2).enumerate() {
        if validate_link(&pair[0], &pair[1]).is_err() {
            return bad(i + 1);
        }
    }
    ChainValidity::Valid
}

/// Append-only chain, optionally backed by a `chain.jsonl` file.
#[derive(Debug)]
pub struct Chain {
    blocks: Vec<Block>,
    store: Option<File>,
}

impl Default for Chain {
    fn default() -> Self {
        Self::new()
    }
}

impl Chain {
    /// In-memory chain holding only genesis.
    pub fn new() -> Self {
        Chain {
            blocks: vec![genesis()],
            store: None,
        }
    }

    /// Creates `path` holding the genesis block.
    pub fn create(path: &Path) -> Result<Self, LedgerError> {
        let mut file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => LedgerError::AlreadyExists(path.to_path_buf()),
                _ => LedgerError::Io(e),
            })?;
        write_line(&mut file, &genesis())?;
        Ok(Chain {
            blocks: vec![genesis()],
            store: Some(file),
        })
    }

    /// Loads and validates `path`, then keeps it open for appends.
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let (blocks, complete_len) = read_blocks(path)?;
        if let ChainValidity::Invalid { first_bad_index } = validate_chain(&blocks) {
            return Err(LedgerError::Corrupt(first_bad_index));
        }
        let file = OpenOptions::new().append(true).open(path)?;
        if file.metadata()?.len() > complete_len {
            file.set_len(complete_len)?;
        }
        Ok(Chain {
            blocks,
            store: Some(file),
        })
    }

    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self, LedgerError> {
        if let ChainValidity::Invalid { first_bad_index } = validate_chain(&blocks) {
            return Err(LedgerError::Corrupt(first_bad_index));
        }
        Ok(Chain { blocks, store: None })
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn height(&self) -> BlockIndex {
        self.tip().index()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn get(&self, index: BlockIndex) -> Option<&Block> {
        self.blocks.get(usize::try_from(index).ok()?)
    }

    /// Validates the link, persists the block (if file-backed), then adds
    /// it in memory.
    pub fn append(&mut self, block: Block) -> Result<(), LedgerError> {
        validate_link(self.tip(), &block)?;
        if let Some(file) = self.store.as_mut() {
            write_line(file, &block)?;
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn validate(&self) -> ChainValidity {
        validate_chain(&self.blocks)
    }
}

fn write_line(file: &mut File, block: &Block) -> Result<(), LedgerError> {
    let mut line = serde_json::to_vec(block).map_err(|e| LedgerError::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    line.push(b'\n');
    // One write call per block; readers ignore an unterminated last line.
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}

/// Reads every complete line of a chain file without validating links.
pub fn read_chain_file(path: &Path) -> Result<Vec<Block>, LedgerError> {
    read_blocks(path).map(|(blocks, _)| blocks)
}

fn read_blocks(path: &Path) -> Result<(Vec<Block>, u64), LedgerError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut blocks = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    let mut complete_len = 0u64;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            // Partially written append.
            break;
        }
        let block: Block = serde_json::from_str(buf.trim_end()).map_err(|e| LedgerError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        blocks.push(block);
        complete_len += n as u64;
    }
    Ok((blocks, complete_len))
}
