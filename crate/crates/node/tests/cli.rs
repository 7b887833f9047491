use std::fs;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use aos_core::crypto::{KeyPair, PublicKey};
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_aos");

fn aos(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").env_remove("AOS_DATA_DIR").output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn key(seed: &str) -> PublicKey {
    KeyPair::from_seed(seed.as_bytes()).unwrap().public_key()
}

/// Writes `n` node configs under `root` and returns their paths.
fn configs(root: &Path, n: usize, genesis: Value) -> (Vec<PathBuf>, Vec<u16>) {
    let ports: Vec<u16> = (0..n).map(|_| free_port()).collect();
    let seed = |i: usize| format!("cli-test-node-seed-{i}");
    let peers: Vec<Value> = (0..n)
        .map(|i| json!({ "node_id": i + 1, "address": format!("127.0.0.1:{}", ports[i]), "public_key": key(&seed(i)) }))
        .collect();
    let paths = (0..n)
        .map(|i| {
            let cfg = json!({
                "node_id": i + 1,
                "listen_address": format!("127.0.0.1:{}", ports[i]),
                "peers": peers,
                "data_dir": root.join(format!("n{}", i + 1)),
                "round_timeout_ms": 800,
                "block_interval_ms": 100,
                "key_seed": seed(i),
                "genesis_balances": genesis,
            });
            let path = root.join(format!("n{}.json", i + 1));
            fs::write(&path, cfg.to_string()).unwrap();
            path
        })
        .collect();
    (paths, ports)
}

struct Running(Vec<Child>);

impl Drop for Running {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn spawn(cfg: &Path, log: &Path) -> Child {
    Command::new(BIN)
        .args(["run", "--config", s(cfg)])
        .env("RUST_LOG", "info")
        .env_remove("AOS_DATA_DIR")
        .stdout(Stdio::null())
        .stderr(fs::File::create(log).unwrap())
        .spawn()
        .unwrap()
}

fn height(port: u16) -> Option<u64> {
    let out = aos(&["status", "--address", &format!("127.0.0.1:{port}")]);
    out.status.success().then(|| serde_json::from_slice::<Value>(&out.stdout).ok()?["height"].as_u64())?
}

fn wait_until(secs: u64, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + Duration::from_secs(secs);
    while Instant::now() < end {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(100));
    }
    false
}

#[test]
fn init_validate_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfgs, _) = configs(tmp.path(), 2, json!([]));
    let a = stdout_json(&aos(&["init", "--config", s(&cfgs[0])]));
    let b = stdout_json(&aos(&["init", "--config", s(&cfgs[1])]));
    assert_eq!(a["genesis_hash"], b["genesis_hash"]);
    assert_eq!(a["public_key"], json!(key("cli-test-node-seed-0")));

    let again = aos(&["init", "--config", s(&cfgs[0])]);
    assert_eq!(again.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&again.stderr).contains("DirNotEmpty"));

    let dir = tmp.path().join("n1");
    let v = stdout_json(&aos(&["inspect", "--data-dir", s(&dir), "--validate"]));
    assert_eq!(v, json!({ "valid": true, "blocks": 1 }));
    let g = stdout_json(&aos(&["inspect", "--data-dir", s(&dir), "--height", "0"]));
    assert_eq!(g["index"], json!(0));
    assert_eq!(g["hash"], a["genesis_hash"]);

    let missing = aos(&["inspect", "--data-dir", s(&dir), "--height", "1"]);
    assert_eq!(missing.status.code(), Some(5));
    let unknown = aos(&["inspect", "--data-dir", s(&dir), "--tx-id", &"ab".repeat(32)]);
    assert_eq!(unknown.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("NotFound"));

    // The data directory may also come from the environment.
    let env = Command::new(BIN).args(["inspect", "--validate"]).env("AOS_DATA_DIR", &dir).output().unwrap();
    assert!(env.status.success());
}

#[test]
fn tampered_chain_reports_first_bad_index() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfgs, _) = configs(tmp.path(), 1, json!([]));
    aos(&["init", "--config", s(&cfgs[0])]);
    let dir = tmp.path().join("n1");
    let out = Command::new(BIN)
        .args(["run", "--config", s(&cfgs[0]), "--exit-at-height", "3", "--linger-ms", "0"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let path = dir.join("chain.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    assert!(lines.len() >= 4);
    let mut block: Value = serde_json::from_str(&lines[2]).unwrap();
    block["timestamp"] = json!(block["timestamp"].as_u64().unwrap() ^ 1);
    lines[2] = block.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let v = aos(&["inspect", "--data-dir", s(&dir), "--validate"]);
    assert_eq!(v.status.code(), Some(3));
    let report: Value = serde_json::from_slice(&v.stdout).unwrap();
    assert_eq!(report["first_bad_index"], json!(2));
    // A corrupt chain refuses to start.
    let run = aos(&["run", "--config", s(&cfgs[0])]);
    assert!(!run.status.success());
}

#[test]
fn startup_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfgs, ports) = configs(tmp.path(), 1, json!([]));
    aos(&["init", "--config", s(&cfgs[0])]);

    let _guard = TcpListener::bind(("127.0.0.1", ports[0])).unwrap();
    let busy = aos(&["run", "--config", s(&cfgs[0])]);
    assert!(!busy.status.success());
    assert!(String::from_utf8_lossy(&busy.stderr).contains("binding"));

    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&cfgs[0]).unwrap()).unwrap();
    cfg["peers"][0]["public_key"] = json!(key("some-other-node-key"));
    fs::write(&cfgs[0], cfg.to_string()).unwrap();
    let mismatch = aos(&["run", "--config", s(&cfgs[0])]);
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("peer key mismatch"));
}

#[test]
fn two_nodes_agree_and_survive_garbage() {
    let tmp = tempfile::tempdir().unwrap();
    let alice_seed = "cli-test-alice-wallet";
    let bob = key("cli-test-bob-wallet!!");
    let (cfgs, ports) = configs(tmp.path(), 2, json!([{ "public_key": key(alice_seed), "amount": 40 }]));
    for c in &cfgs {
        aos(&["init", "--config", s(c)]);
    }
    let _nodes = Running(vec![spawn(&cfgs[0], &tmp.path().join("n1.log")), spawn(&cfgs[1], &tmp.path().join("n2.log"))]);
    assert!(wait_until(15, || ports.iter().all(|p| height(*p).is_some())));

    // Garbage, a frame with a bad version, and an oversized length prefix.
    let mut raw = TcpStream::connect(("127.0.0.1", ports[0])).unwrap();
    let junk = b"not json at all";
    raw.write_all(&(junk.len() as u32).to_be_bytes()).unwrap();
    raw.write_all(junk).unwrap();
    let bad_version = json!({ "version": 99, "network_id": "aos-local", "kind": "status", "body": "null" }).to_string();
    raw.write_all(&(bad_version.len() as u32).to_be_bytes()).unwrap();
    raw.write_all(bad_version.as_bytes()).unwrap();
    raw.write_all(&u32::MAX.to_be_bytes()).unwrap();
    drop(raw);

    let alice_key = tmp.path().join("alice.key");
    aos(&["keygen", "--seed", alice_seed, "--out", s(&alice_key)]);
    let a = aos(&["tx", "create-a", "--key", s(&alice_key), "--recipient", &bob.to_hex(), "--expr", "A", "--value", "3"]);
    assert!(a.status.success());
    let a_path = tmp.path().join("a.json");
    fs::write(&a_path, &a.stdout).unwrap();
    let submit = |port: u16, file: &Path| aos(&["submit-tx", "--address", &format!("127.0.0.1:{port}"), "--file", s(file)]);
    let first = submit(ports[0], &a_path);
    let second = submit(ports[1], &a_path);
    assert!(first.status.success() && second.status.success());
    assert_eq!(first.stdout, second.stdout, "resubmission returns the same id");
    let id = String::from_utf8(first.stdout).unwrap().trim().to_string();

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"kind\": \"sealed\"}").unwrap();
    assert!(!submit(ports[0], &bad).status.success());

    assert!(wait_until(30, || ports.iter().all(|p| height(*p).is_some_and(|h| h >= 5))));
    let dirs = [tmp.path().join("n1"), tmp.path().join("n2")];
    let found = aos(&["inspect", "--data-dir", s(&dirs[1]), "--tx-id", &id]);
    assert!(found.status.success(), "tx not committed");
    drop(_nodes);

    let read = |d: &Path| aos_core::ledger::read_chain_file(&d.join("chain.jsonl")).unwrap();
    let (c1, c2) = (read(&dirs[0]), read(&dirs[1]));
    let n = c1.len().min(c2.len());
    assert!(n > 5);
    assert_eq!(c1[..n], c2[..n]);
    let hits: usize = c1.iter().map(|b| b.transactions.iter().filter(|t| t.id().to_hex() == id).count()).sum();
    assert_eq!(hits, 1, "duplicate submission included once");

    let log = fs::read_to_string(tmp.path().join("n1.log")).unwrap();
    assert!(log.contains("malformed"), "{log}");
    assert!(log.contains("bad_version"), "{log}");
    assert!(log.contains("too_large"), "{log}");
}

#[test]
fn simulate_and_mechanism_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.json");
    fs::write(
        &cfg,
        json!({
            "seed": 1, "n": 4,
            "fault_model": ["honest", "byzantine-equivocator", "honest", "honest"],
            "drop_rate": 0.0, "delay": { "min": 1, "max": 5 },
            "max_ticks": 20000, "target_height": 6
        })
        .to_string(),
    )
    .unwrap();
    let trace = tmp.path().join("trace.jsonl");
    let a = stdout_json(&aos(&["simulate", "--config", s(&cfg), "--seed", "9", "--trace", s(&trace)]));
    let b = stdout_json(&aos(&["simulate", "--config", s(&cfg), "--seed", "9"]));
    assert_eq!(a, b);
    assert_eq!(a["seed"], json!(9));
    assert_eq!(a["conflicts"], json!([]));
    let lines = fs::read_to_string(&trace).unwrap();
    assert!(lines.lines().count() > 10);
    assert!(lines.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let out = aos(&["mechanism", "--theta", "0.8,0.2,0,0.6", "--buyer-range=-0.1,1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().next(), Some("lambda,p1,p2"));
    let last: Vec<f64> = csv.lines().last().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((last[0] - 2.0 / 3.0).abs() < 1e-8);

    let sweep = aos(&["mechanism", "--theta", "0.9,0.1,0.1,0.9", "--sweep", "10"]);
    assert_eq!(String::from_utf8(sweep.stdout).unwrap().lines().count(), 12);
    let rejected = aos(&["mechanism", "--theta", "0.2,0.8,0.1,0.9"]);
    assert!(!rejected.status.success());
}

#[test]
fn two_node_deployment_stalls_without_its_peer_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfgs, ports) = configs(tmp.path(), 2, json!([]));
    for c in &cfgs {
        aos(&["init", "--config", s(c)]);
    }
    let mut nodes = Running(vec![spawn(&cfgs[0], &tmp.path().join("a1.log")), spawn(&cfgs[1], &tmp.path().join("a2.log"))]);
    assert!(wait_until(20, || ports.iter().all(|p| height(*p).is_some_and(|h| h >= 3))));

    let mut second = nodes.0.pop().unwrap();
    second.kill().unwrap();
    second.wait().unwrap();
    thread::sleep(Duration::from_millis(500));
    let stalled = height(ports[0]).unwrap();
    thread::sleep(Duration::from_secs(2));
    assert!(height(ports[0]).unwrap() <= stalled + 1, "a lone node of two kept committing");

    nodes.0.push(spawn(&cfgs[1], &tmp.path().join("b2.log")));
    assert!(wait_until(20, || ports.iter().all(|p| height(*p).is_some_and(|h| h >= stalled + 3))));
}
