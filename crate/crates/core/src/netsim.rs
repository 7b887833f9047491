//! Deterministic in-process network of replicas.
//!
//! A single-threaded scheduler orders events by `(tick, sequence)`; drops and
//! delays come from a seeded ChaCha stream, so a config fully determines the
//! event log.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{
    AgreementError, Destination, Disposition, MessageKind, NetworkConfig, Outbound, Replica, ReplicaConfig,
    ReplicaMessage, Step,
};
use crate::crypto::{BlockIndex, Digest, KeyPair, NodeId, PublicKey};
use crate::ledger::{produce_block, Chain};
use crate::proposals::{CommittedTip, Proposal, ProposalState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultModel {
    Honest,
    /// Never starts.
    Crashed,
    /// Sends conflicting proposals to disjoint peer sets on its turns.
    ByzantineEquivocator,
    /// Runs but never sends.
    ByzantineMute,
    /// Floods proposals it is not entitled to make.
    ByzantineSpammer,
}

impl FaultModel {
    pub fn is_byzantine(self) -> bool {
        matches!(
            self,
            FaultModel::ByzantineEquivocator | FaultModel::ByzantineMute | FaultModel::ByzantineSpammer
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayRange {
    pub min: u64,
    pub max: u64,
}

fn default_round_timeout() -> u64 {
    40
}

fn default_one() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n: usize,
    /// One entry per node; empty means all honest.
    #[serde(default)]
    pub fault_model: Vec<FaultModel>,
    #[serde(default)]
    pub drop_rate: f64,
    pub delay: DelayRange,
    pub max_ticks: u64,
    /// Stop once every honest node reaches this height.
    #[serde(default)]
    pub target_height: Option<BlockIndex>,
    #[serde(default = "default_round_timeout")]
    pub round_timeout: u64,
    #[serde(default = "default_one")]
    pub proposal_delay: u64,
    #[serde(default = "default_true")]
    pub record_trace: bool,
}

impl SimConfig {
    pub fn honest(seed: u64, n: usize) -> Self {
        SimConfig {
            seed,
            n,
            fault_model: Vec::new(),
            drop_rate: 0.0,
            delay: DelayRange { min: 1, max: 1 },
            max_ticks: 10_000,
            target_height: None,
            round_timeout: default_round_timeout(),
            proposal_delay: 1,
            record_trace: true,
        }
    }

    pub fn fault(&self, id: NodeId) -> FaultModel {
        self.fault_model.get(id.index()).copied().unwrap_or(FaultModel::Honest)
    }

    pub fn byzantine_count(&self) -> usize {
        self.fault_model.iter().filter(|f| f.is_byzantine()).count()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !self.fault_model.is_empty() && self.fault_model.len() != self.n {
            return bad("fault_model needs one entry per node");
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return bad("drop_rate must lie in [0, 1]");
        }
        if self.delay.min > self.delay.max {
            return bad("delay.min exceeds delay.max");
        }
        if self.round_timeout == 0 {
            return bad("round_timeout must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Deliver,
    Drop,
    Timeout,
    Commit,
    Equivocate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMessage {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_hash: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept: Option<bool>,
}

impl TraceMessage {
    fn of(msg: &ReplicaMessage) -> Self {
        let (proposal_hash, accept) = match msg {
            ReplicaMessage::Agreement(m) => (Some(m.proposal_hash), Some(m.accept)),
            _ => (None, None),
        };
        TraceMessage {
            kind: msg.kind().to_string(),
            proposal_hash,
            accept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub tick: u64,
    pub seq: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<TraceMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disposition: Option<Disposition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<BlockIndex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_hash: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyConflict {
    pub height: BlockIndex,
    pub hashes: Vec<(NodeId, Digest)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    /// More Byzantine nodes than tolerated: safety is not guaranteed.
    pub beyond_threshold: bool,
    pub ticks: u64,
    pub final_heights: Vec<BlockIndex>,
    /// Per height, each node's committed block hash.
    pub committed: BTreeMap<BlockIndex, Vec<(NodeId, Digest)>>,
    /// Committer of each block on the longest honest chain, from height 1.
    pub committers: Vec<NodeId>,
    pub message_counts: BTreeMap<String, u64>,
    pub delivered: u64,
    pub dropped: u64,
    /// Heights where two honest nodes committed different hashes.
    pub conflicts: Vec<SafetyConflict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<SimEvent>,
}

impl SimReport {
    pub fn is_safe(&self) -> bool {
        self.conflicts.is_empty()
    }

    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug)]
enum Pending {
    Deliver { from: NodeId, to: NodeId, msg: ReplicaMessage },
    Timer { node: NodeId },
}

pub struct Simulation {
    cfg: SimConfig,
    network: NetworkConfig,
    replicas: Vec<Replica>,
    queue: BTreeMap<(u64, u64), Pending>,
    next_seq: u64,
    timer_at: Vec<Option<u64>>,
    rng: ChaCha8Rng,
    now: u64,
    trace: Vec<SimEvent>,
    trace_seq: u64,
    message_counts: BTreeMap<String, u64>,
    delivered: u64,
    dropped: u64,
    committed: BTreeMap<BlockIndex, BTreeMap<NodeId, Digest>>,
}

/// Deterministic per-node key for simulation runs.
pub fn sim_keys(seed: u64, id: NodeId) -> KeyPair {
    KeyPair::from_seed(format!("aos/sim/{seed}/node/{id}").as_bytes()).expect("seed is long enough")
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let network = NetworkConfig::new(cfg.n, cfg.round_timeout)?;
        let ids: Vec<NodeId> = (0..cfg.n).map(NodeId::from_index).collect();
        let roster: Vec<PublicKey> = ids.iter().map(|id| sim_keys(cfg.seed, *id).public_key()).collect();
        let replicas = ids
            .iter()
            .map(|id| {
                let mut rc = ReplicaConfig::new(*id, network);
                rc.proposal_delay = cfg.proposal_delay;
                Replica::new(rc, sim_keys(cfg.seed, *id), roster.clone(), Chain::new(), Vec::new())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Simulation {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            timer_at: vec![None; cfg.n],
            cfg,
            network,
            replicas,
            queue: BTreeMap::new(),
            next_seq: 0,
            now: 0,
            trace: Vec::new(),
            trace_seq: 0,
            message_counts: BTreeMap::new(),
            delivered: 0,
            dropped: 0,
            committed: BTreeMap::new(),
        })
    }

    pub fn replica(&self, id: NodeId) -> &Replica {
        &self.replicas[id.index()]
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.cfg.n).map(NodeId::from_index)
    }

    fn honest_ids(&self) -> Vec<NodeId> {
        self.ids().filter(|id| self.cfg.fault(*id) == FaultModel::Honest).collect()
    }

    fn schedule(&mut self, tick: u64, event: Pending) {
        self.queue.insert((tick, self.next_seq), event);
        self.next_seq += 1;
    }

    fn record(&mut self, mut event: SimEvent) {
        if self.cfg.record_trace {
            event.seq = self.trace_seq;
            self.trace.push(event);
        }
        self.trace_seq += 1;
    }

    fn event(&self, kind: EventKind) -> SimEvent {
        SimEvent {
            tick: self.now,
            seq: 0,
            kind,
            from: None,
            to: None,
            message: None,
            disposition: None,
            height: None,
            block_hash: None,
        }
    }

    fn done(&self) -> bool {
        match self.cfg.target_height {
            Some(target) => self.honest_ids().iter().all(|id| self.replica(*id).height() >= target),
            None => false,
        }
    }

    /// Runs until the target height, an empty queue or `max_ticks`.
    pub fn run(&mut self) -> SimReport {
        for id in self.ids().collect::<Vec<_>>() {
            if self.cfg.fault(id) == FaultModel::Crashed {
                continue;
            }
            let step = self.replicas[id.index()].start(0);
            self.dispatch(id, step);
        }
        while !self.done() {
            let Some(((tick, _), event)) = self.queue.pop_first() else { break };
            if tick > self.cfg.max_ticks {
                break;
            }
            self.now = tick;
            match event {
                Pending::Deliver { from, to, msg } => self.deliver(from, to, msg),
                Pending::Timer { node } => {
                    if self.timer_at[node.index()] == Some(tick) {
                        self.timer_at[node.index()] = None;
                        self.fire_timer(node);
                    }
                }
            }
        }
        self.report()
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, msg: ReplicaMessage) {
        let mut ev = self.event(EventKind::Deliver);
        ev.from = Some(from);
        ev.to = Some(to);
        ev.message = Some(TraceMessage::of(&msg));
        if self.cfg.fault(to) == FaultModel::Crashed {
            ev.kind = EventKind::Drop;
            self.dropped += 1;
            self.record(ev);
            return;
        }
        self.delivered += 1;
        let step = self.replicas[to.index()].handle(from, msg, self.now);
        ev.disposition = Some(step.disposition);
        self.record(ev);
        self.dispatch(to, step);
    }

    fn fire_timer(&mut self, node: NodeId) {
        let now = self.now;
        let mut step = Step::default();
        match self.cfg.fault(node) {
            FaultModel::ByzantineEquivocator if self.replicas[node.index()].proposal_due(now) => {
                step = self.equivocate(node);
            }
            FaultModel::ByzantineSpammer if !self.replicas[node.index()].proposal_due(now) => {
                step.outbound.extend(self.spam(node));
            }
            _ => {}
        }
        let replica = &mut self.replicas[node.index()];
        let timed_out = now >= replica.round_deadline();
        let more = replica.on_timer(now);
        step.outbound.extend(more.outbound);
        step.committed.extend(more.committed);
        if timed_out {
            let mut ev = self.event(EventKind::Timeout);
            ev.to = Some(node);
            ev.height = Some(self.replicas[node.index()].height() + 1);
            self.record(ev);
        }
        self.dispatch(node, step);
    }

    /// Two distinct proposals for the same height, each sent to one side of
    /// a random split of the peers. The equivocator votes for both.
    fn equivocate(&mut self, node: NodeId) -> Step {
        let now = self.now;
        let mut peers: Vec<NodeId> = self.ids().filter(|p| *p != node).collect();
        let replica = &mut self.replicas[node.index()];
        let (Ok(a), Ok(b)) = (replica.build_proposal(now), replica.build_proposal(now + 1)) else {
            return Step::default();
        };
        if peers.len() < 2 {
            return replica.install_own_proposal(a, now);
        }
        peers.shuffle(&mut self.rng);
        let split = self.rng.gen_range(1..peers.len());
        let (side_a, side_b) = peers.split_at(split);
        let (ha, hb) = (a.hash, b.hash);
        let created_b = replica.sign(MessageKind::ProposalCreated, hb, true, Some(b));
        let mut step = replica.install_own_proposal(a, now);
        let mut outbound = Vec::new();
        for out in step.outbound.drain(..) {
            match &out.msg {
                ReplicaMessage::Agreement(m) if m.kind == MessageKind::ProposalCreated && m.proposal_hash == ha => {
                    outbound.extend(side_a.iter().map(|p| Outbound {
                        to: Destination::To(*p),
                        msg: out.msg.clone(),
                    }));
                }
                _ => outbound.push(out),
            }
        }
        outbound.extend(side_b.iter().map(|p| Outbound {
            to: Destination::To(*p),
            msg: ReplicaMessage::Agreement(created_b.clone()),
        }));
        for h in [ha, hb] {
            for kind in [MessageKind::ProposalResponse, MessageKind::ProposalResolution] {
                outbound.push(Outbound {
                    to: Destination::All,
                    msg: ReplicaMessage::Agreement(replica.sign(kind, h, true, None)),
                });
            }
        }
        step.outbound = outbound;
        let mut ev = self.event(EventKind::Equivocate);
        ev.from = Some(node);
        ev.height = Some(self.replicas[node.index()].height() + 1);
        self.record(ev);
        step
    }

    /// A well-formed proposal from a node that is not elected.
    fn spam(&mut self, node: NodeId) -> Vec<Outbound> {
        let replica = &self.replicas[node.index()];
        let chain = replica.chain();
        let tip = CommittedTip::of_chain(chain);
        let mut p = Proposal {
            proposal_id: tip.proposal_id + 1,
            proposer: node,
            block: produce_block(chain.tip(), Vec::new(), node, self.now),
            parent_proposal_hash: tip.proposal_hash,
            hash: Digest::ZERO,
            state: ProposalState::Created,
        };
        p.hash = p.compute_hash();
        let msg = replica.sign(MessageKind::ProposalCreated, p.hash, true, Some(p));
        vec![Outbound {
            to: Destination::All,
            msg: ReplicaMessage::Agreement(msg),
        }]
    }

    fn dispatch(&mut self, node: NodeId, step: Step) {
        for block in &step.committed {
            self.committed.entry(block.index()).or_default().insert(node, block.hash);
            let mut ev = self.event(EventKind::Commit);
            ev.to = Some(node);
            ev.height = Some(block.index());
            ev.block_hash = Some(block.hash);
            self.record(ev);
        }
        if self.cfg.fault(node) != FaultModel::ByzantineMute {
            for out in step.outbound {
                let targets: Vec<NodeId> = match out.to {
                    Destination::All => self.ids().filter(|p| *p != node).collect(),
                    Destination::To(p) if p != node && p.index() < self.cfg.n => vec![p],
                    Destination::To(_) => Vec::new(),
                };
                for to in targets {
                    *self.message_counts.entry(out.msg.kind().to_string()).or_insert(0) += 1;
                    if self.cfg.drop_rate > 0.0 && self.rng.gen_bool(self.cfg.drop_rate) {
                        self.dropped += 1;
                        let mut ev = self.event(EventKind::Drop);
                        ev.from = Some(node);
                        ev.to = Some(to);
                        ev.message = Some(TraceMessage::of(&out.msg));
                        self.record(ev);
                        continue;
                    }
                    let delay = self.rng.gen_range(self.cfg.delay.min..=self.cfg.delay.max);
                    let tick = self.now + delay;
                    self.schedule(
                        tick,
                        Pending::Deliver {
                            from: node,
                            to,
                            msg: out.msg.clone(),
                        },
                    );
                }
            }
        }
        let replica = &self.replicas[node.index()];
        if replica.halted().is_none() {
            let at = replica.next_deadline().max(self.now + 1);
            if self.timer_at[node.index()].is_none_or(|t| t != at) {
                self.timer_at[node.index()] = Some(at);
                self.schedule(at, Pending::Timer { node });
            }
        }
    }

    fn report(&self) -> SimReport {
        let honest = self.honest_ids();
        let mut conflicts = Vec::new();
        for (height, by_node) in &self.committed {
            let hashes: Vec<(NodeId, Digest)> = by_node
                .iter()
                .filter(|(id, _)| honest.contains(id))
                .map(|(id, h)| (*id, *h))
                .collect();
            if hashes.windows(2).any(|w| w[0].1 != w[1].1) {
                conflicts.push(SafetyConflict {
                    height: *height,
                    hashes,
                });
            }
        }
        let longest = honest
            .iter()
            .map(|id| self.replica(*id))
            .max_by_key(|r| r.height())
            .unwrap_or(&self.replicas[0]);
        SimReport {
            seed: self.cfg.seed,
            n: self.cfg.n,
            f: self.network.f,
            beyond_threshold: self.cfg.byzantine_count() > self.network.f,
            ticks: self.now,
            final_heights: self.replicas.iter().map(Replica::height).collect(),
            committed: self
                .committed
                .iter()
                .map(|(h, m)| (*h, m.iter().map(|(id, d)| (*id, *d)).collect()))
                .collect(),
            committers: longest.chain().blocks()[1..].iter().map(|b| b.header.committer).collect(),
            message_counts: self.message_counts.clone(),
            delivered: self.delivered,
            dropped: self.dropped,
            conflicts,
            trace: self.trace.clone(),
        }
    }
}

pub fn run(cfg: &SimConfig) -> Result<SimReport, SimError> {
    Ok(Simulation::new(cfg.clone())?.run())
}
