//! Node configuration file and data directory layout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aos_core::crypto::{KeyPair, NodeId, PublicKey};
use serde::{Deserialize, Serialize};

pub const CHAIN_FILE: &str = "chain.jsonl";
pub const KEY_FILE: &str = "node.key";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerConfig {
    pub node_id: NodeId,
    pub address: String,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisAccount {
    pub public_key: PublicKey,
    pub amount: u64,
}

fn default_network_id() -> String {
    "aos-local".into()
}

fn default_round_timeout_ms() -> u64 {
    2_000
}

fn default_block_interval_ms() -> u64 {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    /// Envelopes carrying another id are dropped.
    #[serde(default = "default_network_id")]
    pub network_id: String,
    pub node_id: NodeId,
    pub listen_address: String,
    /// Every node of the deployment, this one included, ordered by id.
    /// All nodes must hold the same list.
    pub peers: Vec<PeerConfig>,
    /// Overridden by `AOS_DATA_DIR` or `--data-dir`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_round_timeout_ms")]
    pub round_timeout_ms: u64,
    /// Pause between a commit and this node's next proposal.
    #[serde(default = "default_block_interval_ms")]
    pub block_interval_ms: u64,
    #[serde(default)]
    pub dp_epsilon: Option<f64>,
    #[serde(default)]
    pub genesis_balances: Vec<GenesisAccount>,
    /// Key seed used by `init`; a random key is generated when absent.
    #[serde(default)]
    pub key_seed: Option<String>,
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: NodeConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.peers.is_empty() {
            bail!("peer list is empty");
        }
        for (i, p) in self.peers.iter().enumerate() {
            if p.node_id != NodeId::from_index(i) {
                bail!("peer {} listed at position {}; ids must run 1..=n in order", p.node_id, i + 1);
            }
        }
        if self.node_id.index() >= self.peers.len() {
            bail!("node_id {} is not in the peer list", self.node_id);
        }
        if self.round_timeout_ms == 0 {
            bail!("round_timeout_ms must be positive");
        }
        if let Some(e) = self.dp_epsilon {
            if e.is_nan() || e <= 0.0 {
                bail!("dp_epsilon must be positive");
            }
        }
        Ok(())
    }

    pub fn roster(&self) -> Vec<PublicKey> {
        self.peers.iter().map(|p| p.public_key).collect()
    }

    pub fn genesis(&self) -> Vec<(PublicKey, u64)> {
        self.genesis_balances.iter().map(|a| (a.public_key, a.amount)).collect()
    }

    /// `--data-dir`, then `AOS_DATA_DIR`, then the config file.
    pub fn resolve_data_dir(&self, cli: Option<PathBuf>) -> Result<PathBuf> {
        cli.or_else(|| self.data_dir.clone())
            .context("no data directory: pass --data-dir, set AOS_DATA_DIR or set data_dir in the config")
    }
}

pub fn key_from_seed_text(seed: &str) -> Result<KeyPair> {
    KeyPair::from_seed(seed.as_bytes()).map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn write_key(dir: &Path, seed: &[u8]) -> Result<KeyPair> {
    let keys = KeyPair::from_seed(seed).map_err(|e| anyhow::anyhow!("{e}"))?;
    fs::write(dir.join(KEY_FILE), hex::encode(seed))?;
    Ok(keys)
}

pub fn read_key(dir: &Path) -> Result<KeyPair> {
    let path = dir.join(KEY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let seed = hex::decode(text.trim()).context("key file is not hex")?;
    KeyPair::from_seed(&seed).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
