//! The long-running node: TCP transport around one [`Replica`].
//!
//! Reader threads verify envelopes and push them onto a single inbox. The
//! consensus thread owns the replica and the data directory; it is the only
//! writer of `chain.jsonl`, `state.json` and `receipts.jsonl`.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use aos_core::agreement::{
    Admission, Destination, Disposition, NetworkConfig, PoolError, Replica, ReplicaConfig, ReplicaMessage, Step,
};
use aos_core::crypto::{Digest, KeyPair, NodeId, PublicKey};
use aos_core::ledger::Chain;
use aos_core::privacy::{inject_decoys, DPConfig};
use aos_core::transactions::{LedgerTx, TxOutcome};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{self, NodeConfig, CHAIN_FILE, STATE_FILE};
use crate::wire::{
    self, ErrorReply, StatusReply, SubmitAck, WireEnvelope, KIND_ERROR, KIND_STATUS, KIND_STATUS_REPLY, KIND_SUBMIT_ACK,
    KIND_SUBMIT_TX,
};

pub const RECEIPTS_FILE: &str = "receipts.jsonl";
const PEER_QUEUE: usize = 4096;
const CONNECT_TIMEOUT: Duration = Duration::from_millis(500);

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Exit cleanly once this height is committed and `linger` has passed.
    pub exit_at_height: Option<u64>,
    /// Time spent answering peers after reaching `exit_at_height`.
    pub linger: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            exit_at_height: None,
            linger: Duration::from_secs(2),
        }
    }
}

/// Summary rewritten after every commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub node_id: NodeId,
    pub height: u64,
    pub tip_hash: Digest,
    pub balances: BTreeMap<PublicKey, u64>,
    pub total_supply: u128,
    pub awaiting: usize,
    pub consumed: usize,
}

enum Inbound {
    Replica { from: NodeId, msg: ReplicaMessage },
    Submit { tx: LedgerTx, reply: Sender<WireEnvelope> },
    Status { reply: Sender<WireEnvelope> },
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn run(cfg: &NodeConfig, data_dir: &Path, opts: &RunOptions) -> Result<()> {
    let keys = config::read_key(data_dir)?;
    let me = cfg.node_id;
    if cfg.peers[me.index()].public_key != keys.public_key() {
        bail!(
            "peer key mismatch: config lists {} for node {me} but {} holds {}",
            cfg.peers[me.index()].public_key,
            data_dir.display(),
            keys.public_key()
        );
    }
    let chain = Chain::open(&data_dir.join(CHAIN_FILE)).context("opening chain")?;
    let network = NetworkConfig::new(cfg.peers.len(), cfg.round_timeout_ms)?;
    let mut rcfg = ReplicaConfig::new(me, network);
    rcfg.proposal_delay = cfg.block_interval_ms.max(1);
    let roster = cfg.roster();
    let replica = Replica::new(rcfg, keys.clone(), roster.clone(), chain, cfg.genesis())?;
    let dp = cfg.dp_epsilon.map(DPConfig::new).transpose().map_err(|e| anyhow::anyhow!("{e:?}"))?;

    let listener = TcpListener::bind(&cfg.listen_address)
        .with_context(|| format!("binding {}", cfg.listen_address))?;
    info!(
        "node {me} listening on {} (n={}, quorum={}, height={})",
        listener.local_addr()?,
        network.n,
        network.response_quorum,
        replica.height()
    );

    let (tx, rx) = mpsc::channel();
    spawn_acceptor(listener, tx, Arc::new(roster), cfg.network_id.clone());
    let peers = PeerLinks::spawn(cfg);

    let mut node = Node {
        replica,
        keys,
        network_id: cfg.network_id.clone(),
        data_dir: data_dir.to_path_buf(),
        peers,
        dp,
    };
    node.event_loop(rx, opts)
}

struct Node {
    replica: Replica,
    keys: KeyPair,
    network_id: String,
    data_dir: PathBuf,
    peers: PeerLinks,
    dp: Option<DPConfig>,
}

impl Node {
    fn event_loop(&mut self, rx: Receiver<Inbound>, opts: &RunOptions) -> Result<()> {
        let step = self.replica.start(now_ms());
        self.after(step)?;
        self.persist_state()?;
        let mut reached: Option<Instant> = None;
        loop {
            let wait = self.replica.next_deadline().saturating_sub(now_ms()).min(500);
            match rx.recv_timeout(Duration::from_millis(wait)) {
                Ok(ev) => self.on_inbound(ev)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => bail!("listener stopped"),
            }
            let now = now_ms();
            if now >= self.replica.next_deadline() {
                let step = self.replica.on_timer(now);
                self.after(step)?;
            }
            if let Some(reason) = self.replica.halted() {
                bail!("replica halted: {reason}");
            }
            if let Some(target) = opts.exit_at_height {
                if self.replica.height() >= target {
                    let at = *reached.get_or_insert_with(Instant::now);
                    if at.elapsed() >= opts.linger {
                        info!("node {}: reached height {target}, exiting", self.replica.id());
                        return Ok(());
                    }
                }
            }
        }
    }

    fn on_inbound(&mut self, ev: Inbound) -> Result<()> {
        match ev {
            Inbound::Replica { from, msg } => {
                let kind = msg.kind();
                let step = self.replica.handle(from, msg, now_ms());
                match step.disposition {
                    Disposition::Dropped(reason) => info!("drop {kind} from {from}: {reason:?}"),
                    d => debug!("{kind} from {from}: {d:?}"),
                }
                self.after(step)?;
            }
            Inbound::Submit { tx, reply } => {
                let env = self.on_submit(tx);
                let _ = reply.send(env);
            }
            Inbound::Status { reply } => {
                let tip = self.replica.chain().tip();
                let status = StatusReply {
                    node_id: self.replica.id(),
                    height: tip.index(),
                    tip_hash: tip.hash,
                    pool: self.replica.pool_len(),
                };
                let _ = reply.send(WireEnvelope::client(&self.network_id, KIND_STATUS_REPLY, &status));
            }
        }
        Ok(())
    }

    fn on_submit(&mut self, tx: LedgerTx) -> WireEnvelope {
        let real = tx.id();
        let batch = match &self.dp {
            Some(dp) => inject_decoys(vec![tx], dp, &self.keys, &mut rand::rngs::OsRng),
            None => vec![tx],
        };
        let mut reply = None;
        for tx in batch {
            let id = tx.id();
            let result = self.replica.submit(tx.clone());
            if let Ok((_, Admission::Queued)) = result {
                let msg = ReplicaMessage::Transaction(tx);
                self.peers.broadcast(&WireEnvelope::replica(&self.network_id, self.replica.id(), &self.keys, &msg));
            }
            if id != real {
                continue;
            }
            reply = Some(match result {
                Ok((tx_id, admission)) => {
                    info!("submitted {tx_id} ({admission:?})");
                    let ack = SubmitAck {
                        tx_id,
                        queued: admission == Admission::Queued,
                    };
                    WireEnvelope::client(&self.network_id, KIND_SUBMIT_ACK, &ack)
                }
                Err(e @ (PoolError::Malformed(_) | PoolError::Full)) => {
                    info!("rejected submission {real}: {e}");
                    error_envelope(&self.network_id, e.to_string())
                }
            });
        }
        reply.expect("the submitted transaction is in its own batch")
    }

    fn after(&mut self, step: Step) -> Result<()> {
        let me = self.replica.id();
        for out in step.outbound {
            let env = WireEnvelope::replica(&self.network_id, me, &self.keys, &out.msg);
            match out.to {
                Destination::All => self.peers.broadcast(&env),
                Destination::To(id) => self.peers.send(id, &env),
            }
        }
        if !step.committed.is_empty() {
            for b in &step.committed {
                info!("node {me}: committed height {} hash {} ({} txs)", b.index(), b.hash.short(), b.transactions.len());
            }
            self.persist_receipts(&step.outcomes)?;
            self.persist_state()?;
        }
        Ok(())
    }

    fn persist_state(&self) -> Result<()> {
        let state = self.replica.state();
        let tip = self.replica.chain().tip();
        let snap = StateSnapshot {
            node_id: self.replica.id(),
            height: tip.index(),
            tip_hash: tip.hash,
            balances: state.balances.clone(),
            total_supply: state.total_supply(),
            awaiting: state.awaiting.len(),
            consumed: state.consumed.len(),
        };
        config::write_atomic(&self.data_dir.join(STATE_FILE), &serde_json::to_vec_pretty(&snap)?)
    }

    fn persist_receipts(&self, outcomes: &[TxOutcome]) -> Result<()> {
        if outcomes.is_empty() {
            return Ok(());
        }
        let file = OpenOptions::new().create(true).append(true).open(self.data_dir.join(RECEIPTS_FILE))?;
        let mut w = BufWriter::new(file);
        for o in outcomes {
            serde_json::to_writer(&mut w, o)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn error_envelope(network_id: &str, error: String) -> WireEnvelope {
    WireEnvelope::client(network_id, KIND_ERROR, &ErrorReply { error })
}

fn spawn_acceptor(listener: TcpListener, inbox: Sender<Inbound>, roster: Arc<Vec<PublicKey>>, network_id: String) {
    thread::spawn(move || {
        for conn in listener.incoming() {
            match conn {
                Ok(stream) => {
                    let inbox = inbox.clone();
                    let roster = Arc::clone(&roster);
                    let network_id = network_id.clone();
                    thread::spawn(move || serve_connection(stream, inbox, &roster, &network_id));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    });
}

/// Reads frames until the peer hangs up. Undecodable frames are logged and
/// skipped; framing errors close the connection.
fn serve_connection(stream: TcpStream, inbox: Sender<Inbound>, roster: &[PublicKey], network_id: &str) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let _ = stream.set_nodelay(true);
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(e) => {
            warn!("{peer}: {e}");
            return;
        }
    };
    let mut reader = BufReader::new(stream);
    loop {
        let frame = match wire::read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e) => {
                warn!("drop connection {peer}: {}", e.code());
                return;
            }
        };
        let env = match wire::parse_envelope(&frame).and_then(|env| env.check_header(network_id).map(|()| env)) {
            Ok(env) => env,
            Err(e) => {
                warn!("drop envelope from {peer}: {} ({e})", e.code());
                continue;
            }
        };
        let (ev, wait) = match env.kind.as_str() {
            KIND_SUBMIT_TX => match env.decode_body::<LedgerTx>() {
                Ok(tx) => {
                    let (reply, wait) = mpsc::channel();
                    (Inbound::Submit { tx, reply }, Some(wait))
                }
                Err(e) => {
                    warn!("drop submission from {peer}: {}", e.code());
                    let _ = wire::write_envelope(&mut writer, &error_envelope(network_id, e.to_string()));
                    continue;
                }
            },
            KIND_STATUS => {
                let (reply, wait) = mpsc::channel();
                (Inbound::Status { reply }, Some(wait))
            }
            _ => match env.open_replica(network_id, roster) {
                Ok((from, msg)) => (Inbound::Replica { from, msg }, None),
                Err(e) => {
                    warn!("drop envelope from {peer}: {} ({e})", e.code());
                    continue;
                }
            },
        };
        if inbox.send(ev).is_err() {
            return;
        }
        if let Some(Ok(reply)) = wait.map(|w| w.recv()) {
            if wire::write_envelope(&mut writer, &reply).is_err() {
                return;
            }
        }
    }
}

/// Outbound links, one writer thread and bounded queue per peer.
struct PeerLinks {
    me: NodeId,
    links: Vec<Option<SyncSender<Vec<u8>>>>,
}

impl PeerLinks {
    fn spawn(cfg: &NodeConfig) -> Self {
        let links = cfg
            .peers
            .iter()
            .map(|p| {
                if p.node_id == cfg.node_id {
                    return None;
                }
                let (tx, rx) = mpsc::sync_channel(PEER_QUEUE);
                let addr = p.address.clone();
                let id = p.node_id;
                thread::spawn(move || peer_writer(id, addr, rx));
                Some(tx)
            })
            .collect();
        PeerLinks { me: cfg.node_id, links }
    }

    fn send(&self, to: NodeId, env: &WireEnvelope) {
        if to == self.me {
            return;
        }
        if let Some(Some(link)) = self.links.get(to.index()) {
            match link.try_send(env.to_frame()) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => warn!("queue to node {to} full, dropping {}", env.kind),
                Err(TrySendError::Disconnected(_)) => warn!("writer for node {to} is gone"),
            }
        }
    }

    fn broadcast(&self, env: &WireEnvelope) {
        for i in 0..self.links.len() {
            self.send(NodeId::from_index(i), env);
        }
    }
}

/// Sends queued frames, reconnecting on failure. A frame that cannot be
/// delivered after one reconnect is dropped; the protocol's timeouts
/// retransmit what matters.
fn peer_writer(id: NodeId, addr: String, rx: Receiver<Vec<u8>>) {
    let mut stream: Option<TcpStream> = None;
    for frame in rx {
        for _ in 0..2 {
            if stream.is_none() {
                stream = connect(&addr);
            }
            let Some(s) = stream.as_mut() else {
                debug!("node {id} at {addr} unreachable, dropping frame");
                break;
            };
            if s.write_all(&frame).is_ok() {
                break;
            }
            stream = None;
        }
    }
}

fn connect(addr: &str) -> Option<TcpStream> {
    let target = addr.to_socket_addrs().ok()?.next()?;
    let s = TcpStream::connect_timeout(&target, CONNECT_TIMEOUT).ok()?;
    let _ = s.set_nodelay(true);
    Some(s)
}

/// One request and its reply over a fresh connection.
pub fn request(address: &str, env: &WireEnvelope) -> Result<WireEnvelope> {
    let mut stream = TcpStream::connect(address).with_context(|| format!("connecting to {address}"))?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    wire::write_envelope(&mut stream, env)?;
    let frame = wire::read_frame(&mut stream)?.context("node closed the connection without replying")?;
    Ok(wire::parse_envelope(&frame)?)
}
