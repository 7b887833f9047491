//! A captured envelope stream replayed into a fresh node reproduces the
//! node's state transitions.

use aos_core::agreement::{Destination, Disposition, NetworkConfig, Replica, ReplicaConfig, Step};
use aos_core::crypto::{KeyPair, NodeId, PublicKey};
use aos_core::ledger::Chain;
use aos_node::wire::{parse_envelope, read_frame, WireEnvelope};

const NET: &str = "replay";
const N: usize = 3;

fn keys(i: usize) -> KeyPair {
    KeyPair::from_seed(format!("replay-test-node-{i:04}").as_bytes()).unwrap()
}

fn roster() -> Vec<PublicKey> {
    (0..N).map(|j| keys(j).public_key()).collect()
}

fn replica(i: usize) -> Replica {
    let network = NetworkConfig::new(N, 50).unwrap();
    Replica::new(ReplicaConfig::new(NodeId::from_index(i), network), keys(i), roster(), Chain::new(), vec![]).unwrap()
}

/// Input to node 1: a received frame or a timer firing.
#[derive(Clone)]
enum Input {
    Frame(Vec<u8>),
    Timer,
}

fn apply(r: &mut Replica, input: &Input, now: u64) -> Step {
    match input {
        Input::Frame(frame) => {
            let env = parse_envelope(&read_frame(&mut &frame[..]).unwrap().unwrap()).unwrap();
            let (from, msg) = env.open_replica(NET, &roster()).unwrap();
            r.handle(from, msg, now)
        }
        Input::Timer => r.on_timer(now),
    }
}

#[test]
fn replayed_stream_reproduces_transitions() {
    let mut live: Vec<Replica> = (0..N).map(replica).collect();
    let mut captured: Vec<(u64, Input)> = Vec::new();
    let mut observed: Vec<Disposition> = Vec::new();
    let mut queue: Vec<(usize, Vec<u8>)> = Vec::new();

    let route = |from: usize, step: Step, queue: &mut Vec<(usize, Vec<u8>)>| {
        for o in step.outbound {
            let frame = WireEnvelope::replica(NET, NodeId::from_index(from), &keys(from), &o.msg).to_frame();
            for j in 0..N {
                let hit = match o.to {
                    Destination::All => j != from,
                    Destination::To(id) => id.index() == j,
                };
                if hit {
                    queue.push((j, frame.clone()));
                }
            }
        }
    };
    for (i, r) in live.iter_mut().enumerate() {
        let step = r.start(0);
        route(i, step, &mut queue);
    }
    for now in 1..600u64 {
        let mut inputs: Vec<(usize, Input)> = std::mem::take(&mut queue).into_iter().map(|(to, f)| (to, Input::Frame(f))).collect();
        for (i, r) in live.iter().enumerate() {
            if now >= r.next_deadline() {
                inputs.push((i, Input::Timer));
            }
        }
        for (to, input) in inputs {
            let step = apply(&mut live[to], &input, now);
            if to == 0 {
                captured.push((now, input));
                observed.push(step.disposition);
            }
            route(to, step, &mut queue);
        }
    }
    assert!(live[0].height() >= 5, "node 1 only reached {}", live[0].height());

    let mut fresh = replica(0);
    fresh.start(0);
    let replayed: Vec<Disposition> = captured.iter().map(|(now, input)| apply(&mut fresh, input, *now).disposition).collect();
    assert_eq!(replayed, observed);
    assert_eq!(fresh.chain().blocks(), live[0].chain().blocks());
    assert_eq!(fresh.state(), live[0].state());
}
