//! Subcommand implementations. Each returns the JSON or CSV text it prints.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aos_core::crypto::{Digest, KeyPair, PublicKey};
use aos_core::ledger::{read_chain_file, validate_chain, Chain, ChainValidity};
use aos_core::mechanisms::{run_mechanism, sweep, Environment, MechanismError, TauRange, TracePoint};
use aos_core::netsim::{self, SimConfig};
use aos_core::transactions::{open_and_verify, seal, sign, Invocation, LedgerState, LedgerTx, TransactionBody, TxOutcome};
use aos_core::txalgebra::{Binding, Expr};
use rand::rngs::OsRng;
use rand::RngCore;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{self, NodeConfig, CHAIN_FILE, KEY_FILE};
use crate::runtime::RECEIPTS_FILE;
use crate::wire::{ErrorReply, StatusReply, SubmitAck, WireEnvelope, KIND_ERROR, KIND_STATUS, KIND_SUBMIT_TX};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("DirNotEmpty: {0}")]
    DirNotEmpty(PathBuf),
    #[error("NotFound: {0}")]
    NotFound(String),
}

pub fn init(cfg: &NodeConfig, data_dir: &Path) -> Result<Value> {
    if data_dir.exists() && fs::read_dir(data_dir)?.next().is_some() {
        return Err(CliError::DirNotEmpty(data_dir.to_path_buf()).into());
    }
    fs::create_dir_all(data_dir)?;
    let seed = match &cfg.key_seed {
        Some(s) => s.as_bytes().to_vec(),
        None => {
            let mut s = vec![0u8; 32];
            OsRng.fill_bytes(&mut s);
            s
        }
    };
    let keys = config::write_key(data_dir, &seed)?;
    let chain = Chain::create(&data_dir.join(CHAIN_FILE))?;
    let listed = cfg.peers[cfg.node_id.index()].public_key;
    if listed != keys.public_key() {
        log::warn!("config lists key {listed} for node {}; update it to {}", cfg.node_id, keys.public_key());
    }
    Ok(json!({
        "node_id": cfg.node_id,
        "public_key": keys.public_key(),
        "genesis_hash": chain.tip().hash,
        "data_dir": data_dir,
    }))
}

pub fn keygen(seed: Option<&str>, out: Option<&Path>) -> Result<Value> {
    let seed = match seed {
        Some(s) => s.as_bytes().to_vec(),
        None => {
            let mut s = vec![0u8; 32];
            OsRng.fill_bytes(&mut s);
            s
        }
    };
    let keys = KeyPair::from_seed(&seed).map_err(|e| anyhow::anyhow!("{e}"))?;
    match out {
        Some(path) => {
            if path.exists() {
                bail!("{} already exists", path.display());
            }
            fs::write(path, hex::encode(&seed))?;
            Ok(json!({ "public_key": keys.public_key(), "key_file": path }))
        }
        None => Ok(json!({ "public_key": keys.public_key(), "seed_hex": hex::encode(&seed) })),
    }
}

/// Loads a key file written by `keygen --out` or `init`.
pub fn load_key_file(path: &Path) -> Result<KeyPair> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let seed = hex::decode(text.trim()).context("key file is not hex")?;
    KeyPair::from_seed(&seed).map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn key_file_in(data_dir: &Path) -> PathBuf {
    data_dir.join(KEY_FILE)
}

pub fn create_type_a(sender: &KeyPair, recipient: PublicKey, expr: &str, value: u64, nonce: u64) -> Result<LedgerTx> {
    let expr: Expr = expr.parse().map_err(|e| anyhow::anyhow!("expression: {e}"))?;
    expr.validate().map_err(|e| anyhow::anyhow!("expression: {e}"))?;
    let body = TransactionBody::type_a(sender.public_key(), recipient, expr, value, nonce);
    let signed = sign(body, sender)?;
    Ok(LedgerTx::Sealed(seal(&signed, &recipient, &mut OsRng)))
}

/// Opens `target` with the recipient key and builds the invocation.
pub fn create_type_b(recipient: &KeyPair, target: &LedgerTx, bindings: &[String], nonce: u64) -> Result<LedgerTx> {
    let LedgerTx::Sealed(sealed) = target else {
        bail!("target is not a sealed Type A transaction");
    };
    let opened = open_and_verify(sealed, recipient)?;
    let binding = parse_bindings(bindings)?;
    let body = TransactionBody::type_b(recipient.public_key(), opened.body.sender, opened.tx_id(), binding, nonce);
    let invoke = sign(body, recipient)?;
    Ok(LedgerTx::Invocation(Invocation { invoke, target: opened }))
}

/// Parses `NAME=0|1` items.
pub fn parse_bindings(items: &[String]) -> Result<Binding> {
    let mut b = Binding::new();
    for item in items {
        let (name, value) = item.split_once('=').with_context(|| format!("binding `{item}` is not NAME=0|1"))?;
        let bit = match value.trim() {
            "0" => false,
            "1" => true,
            other => bail!("binding value `{other}` is not 0 or 1"),
        };
        b.set(name.trim(), bit);
    }
    Ok(b)
}

pub fn submit(address: &str, network_id: &str, tx: &LedgerTx) -> Result<SubmitAck> {
    let reply = crate::runtime::request(address, &WireEnvelope::client(network_id, KIND_SUBMIT_TX, tx))?;
    if reply.kind == KIND_ERROR {
        bail!("node rejected the transaction: {}", reply.decode_body::<ErrorReply>()?.error);
    }
    Ok(reply.decode_body()?)
}

pub fn status(address: &str, network_id: &str) -> Result<StatusReply> {
    let reply = crate::runtime::request(address, &WireEnvelope::client(network_id, KIND_STATUS, &()))?;
    Ok(reply.decode_body()?)
}

pub enum InspectQuery {
    Height(u64),
    TxId(Digest),
    Validate,
    Balances(Vec<(PublicKey, u64)>),
}

/// Read-only queries over a data directory. Never opens the chain for
/// writing, so it is safe against a running node.
pub fn inspect(data_dir: &Path, query: InspectQuery) -> Result<Value> {
    let blocks = read_chain_file(&data_dir.join(CHAIN_FILE))
        .with_context(|| format!("reading {}", data_dir.join(CHAIN_FILE).display()))?;
    match query {
        InspectQuery::Height(h) => {
            let block = blocks.get(h as usize).ok_or_else(|| CliError::NotFound(format!("no block at height {h}")))?;
            Ok(serde_json::to_value(block)?)
        }
        InspectQuery::TxId(id) => {
            let (block, tx) = blocks
                .iter()
                .find_map(|b| b.transactions.iter().find(|t| t.id() == id).map(|t| (b, t)))
                .ok_or_else(|| CliError::NotFound(format!("transaction {id}")))?;
            let receipt = read_receipts(data_dir)?.into_iter().find(|r| r.tx_id == id);
            Ok(json!({
                "height": block.index(),
                "block_hash": block.hash,
                "tx": tx,
                "receipt": receipt,
            }))
        }
        InspectQuery::Validate => {
            let validity = validate_chain(&blocks);
            let mut report = json!({
                "valid": validity.is_valid(),
                "blocks": blocks.len(),
            });
            if let ChainValidity::Invalid { first_bad_index } = validity {
                report["first_bad_index"] = json!(first_bad_index);
            }
            Ok(report)
        }
        InspectQuery::Balances(genesis) => {
            if let ChainValidity::Invalid { first_bad_index } = validate_chain(&blocks) {
                bail!("chain is invalid from height {first_bad_index}");
            }
            let mut state = LedgerState::with_balances(genesis);
            let initial = state.total_supply();
            let mut failures = 0;
            for b in &blocks[1..] {
                failures += state.apply_block(b.index(), &b.transactions).iter().filter(|o| o.result.is_err()).count();
            }
            Ok(json!({
                "height": blocks.len() - 1,
                "balances": state.balances,
                "genesis_supply": initial,
                "total_supply": state.total_supply(),
                "awaiting": state.awaiting.len(),
                "consumed": state.consumed.len(),
                "failed_txs": failures,
            }))
        }
    }
}

fn read_receipts(data_dir: &Path) -> Result<Vec<TxOutcome>> {
    let path = data_dir.join(RECEIPTS_FILE);
    if !path.exists() {
        return Ok(vec![]);
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).context("parsing receipts"))
        .collect()
}

pub struct SimulateOutput {
    pub summary: Value,
    pub safe: bool,
}

pub fn simulate(config_path: &Path, seed: Option<u64>, trace: Option<&Path>) -> Result<SimulateOutput> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let mut cfg: SimConfig = serde_json::from_str(&text).context("parsing simulation config")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.record_trace = trace.is_some();
    let mut report = netsim::run(&cfg)?;
    if let Some(path) = trace {
        fs::write(path, report.trace_jsonl())?;
    }
    report.trace.clear();
    Ok(SimulateOutput {
        safe: report.is_safe(),
        summary: serde_json::to_value(&report)?,
    })
}

pub struct MechanismArgs {
    pub theta: [f64; 4],
    pub seller: TauRange,
    pub buyer: TauRange,
    pub tolerance: f64,
    pub sweep: Option<u32>,
}

/// CSV of `(λ, P1, P2)`: the bisection trace, or an even sweep of `[0, 1]`.
/// The second value summarizes the outcome.
pub fn mechanism(args: &MechanismArgs) -> Result<(String, Value)> {
    let env = Environment::with_ranges(args.theta, args.seller, args.buyer)?;
    let (points, summary): (Vec<TracePoint>, Value) = match run_mechanism(&env, args.tolerance) {
        Ok(o) => (o.trace.clone(), json!({ "lambda_star": o.lambda_star, "p1": o.p1, "p2": o.p2, "iterations": o.iterations, "crossing": true })),
        Err(MechanismError::NoCrossing(o)) => (o.trace.clone(), json!({ "lambda_star": o.lambda_star, "p1": o.p1, "p2": o.p2, "iterations": o.iterations, "crossing": false })),
        Err(e) => return Err(e.into()),
    };
    let points = match args.sweep {
        Some(steps) => sweep(&env, steps),
        None => points,
    };
    let mut csv = String::from("lambda,p1,p2\n");
    for p in points {
        csv.push_str(&format!("{},{},{}\n", p.lambda, p.p1, p.p2));
    }
    Ok((csv, summary))
}
