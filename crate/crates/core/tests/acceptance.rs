//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! runtime and budget; the process exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gfl::castore::ContentHash;
use gfl::config::{DistillConfig, TrainConfig};
use gfl::hashring::{build_ring, NodeId, NodeRole, Ring, RingError};
use gfl::ledger::{ChainStatus, TraceFilter, TxKind};
use gfl::partition::{make_synthetic, Scheme};
use gfl::rdfl::{Engine, EngineConfig, Phase, TransferKind, TransportMode};
use gfl::sealed::{is_sealed, KeyRegistry, Suite};
use gfl::sim::{self, communication_report, run_experiment, Arm, ExperimentConfig};
use gfl::tinynn::{
    average_params, ce_loss, distill_loss, init_model, kl_divergence, softmax_t, Dataset,
    ModelParams,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- oracles

fn fnv1a_oracle(s: &str) -> u32 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h & 0xffff_ffff) as u32
}

struct OracleEntry {
    pos: u32,
    owner: String,
    real: bool,
    trusted: bool,
}

fn oracle_entries(nodes: &[(String, bool)], vnodes: usize) -> Vec<OracleEntry> {
    let mut out = Vec::new();
    for (id, trusted) in nodes {
        out.push(OracleEntry {
            pos: fnv1a_oracle(id),
            owner: id.clone(),
            real: true,
            trusted: *trusted,
        });
        if *trusted {
            for v in 0..vnodes {
                out.push(OracleEntry {
                    pos: fnv1a_oracle(&format!("{id}#v{v}")),
                    owner: id.clone(),
                    real: false,
                    trusted: true,
                });
            }
        }
    }
    out.sort_by_key(|e| e.pos);
    out
}

/// First entry strictly clockwise of `from` satisfying `pred`, found by a
/// two-pass linear scan over the sorted entries.
fn oracle_scan(
    entries: &[OracleEntry],
    from: u32,
    pred: impl Fn(&OracleEntry) -> bool,
) -> &OracleEntry {
    entries
        .iter()
        .filter(|e| e.pos > from)
        .chain(entries.iter().filter(|e| e.pos <= from))
        .find(|e| pred(e))
        .expect("at least one match")
}

fn random_nodes(rng: &mut ChaCha8Rng, trusted: usize, untrusted: usize) -> Vec<(NodeId, NodeRole)> {
    let mut names = BTreeSet::new();
    while names.len() < trusted + untrusted {
        names.insert(format!(
            "10.{}.{}.{}:{}",
            rng.random::<u8>(),
            rng.random::<u8>(),
            rng.random::<u8>(),
            rng.random_range(1024..65535u16)
        ));
    }
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let role = if i < trusted {
                NodeRole::TRUSTED
            } else {
                NodeRole::UNTRUSTED
            };
            (NodeId::new(n), role)
        })
        .collect()
}

/// Builds a ring from random names, redrawing on the rare position collision.
fn random_ring(
    rng: &mut ChaCha8Rng,
    trusted: usize,
    untrusted: usize,
    vnodes: usize,
) -> (Vec<(NodeId, NodeRole)>, Ring) {
    loop {
        let nodes = random_nodes(rng, trusted, untrusted);
        match build_ring(&nodes, vnodes) {
            Ok(r) => return (nodes, r),
            Err(RingError::PositionCollision { .. }) => continue,
            Err(e) => panic!("{e}"),
        }
    }
}

// ------------------------------------------------------- experiment setup

/// Desk-scale setup shared by the accuracy criteria: 5 nodes, softmax
/// regression on 2-D blobs, 15 rounds.
fn accuracy_config(n_trusted: usize, n_malicious: usize, seed: u64, arm: Arm) -> ExperimentConfig {
    ExperimentConfig {
        n_nodes: 5,
        n_trusted,
        n_malicious,
        scheme: Scheme::Iid,
        rounds: 15,
        train: TrainConfig {
            lr: 0.01,
            weight_decay: 0.001,
            batch_size: 32,
            local_epochs: 5,
            seed: 0,
        },
        distill: DistillConfig::default(),
        transport: TransportMode::Direct,
        arm,
        master_seed: seed,
        n_classes: 4,
        per_class: 200,
        spread: 1.0,
        test_per_class: 250,
        hidden: Vec::new(),
        vnodes: 64,
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Mean final accuracy (in points) of both arms over `SEEDS`.
fn arm_means(make: impl Fn(u64, Arm) -> ExperimentConfig) -> Result<(f64, f64), String> {
    let mut acc = [0.0; 2];
    for seed in SEEDS {
        for (k, arm) in [Arm::Rdfl, Arm::FedAvg].into_iter().enumerate() {
            let out = run_experiment(&make(seed, arm)).map_err(|e| e.to_string())?;
            acc[k] += 100.0 * out.final_accuracy() / SEEDS.len() as f64;
        }
    }
    Ok((acc[0], acc[1]))
}

fn tiny_engine(nodes: &[(NodeId, NodeRole)], ring: Ring, mode: TransportMode) -> Engine {
    let shards = nodes
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), make_synthetic(2, 2, 0.5, i as u64).unwrap()))
        .collect();
    let cfg = EngineConfig {
        train: TrainConfig {
            lr: 0.05,
            batch_size: 4,
            local_epochs: 1,
            ..TrainConfig::default()
        },
        ..EngineConfig::default()
    };
    Engine::new(ring, shards, init_model(&[2, 2], 7).unwrap(), cfg, mode).unwrap()
}

// ---------------------------------------------------------------- criteria

fn sync_completeness() -> Outcome {
    let mut checked = 0;
    for m in 1..=8usize {
        for n in m..=m + 10 {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * m as u64 + 100 * n as u64 + seed);
                let vnodes = [0, 4, 64][seed as usize % 3];
                let (nodes, ring) = random_ring(&mut rng, m, n - m, vnodes);
                let mut e = tiny_engine(&nodes, ring, TransportMode::Direct);
                e.phase_train_and_forward().map_err(|x| x.to_string())?;
                let trusted: BTreeSet<NodeId> = e.trusted().iter().cloned().collect();
                let complete = |e: &Engine| {
                    e.trusted().iter().all(|t| {
                        let held: BTreeSet<NodeId> = e.state.inbox[t]
                            .iter()
                            .filter(|(o, _)| trusted.contains(o))
                            .map(|(o, _)| o.clone())
                            .collect();
                        held == trusted
                    })
                };
                e.begin_sync();
                for step in 0..m - 1 {
                    ensure(!complete(&e), || {
                        format!("m={m} n={n} seed={seed}: complete after {step} < m-1 steps")
                    })?;
                    e.sync_step(Phase::Sync).map_err(|x| x.to_string())?;
                }
                ensure(complete(&e), || {
                    format!("m={m} n={n} seed={seed}: incomplete after m-1 steps")
                })?;
                for t in e.trusted() {
                    let count = e.state.inbox[t]
                        .iter()
                        .filter(|(o, _)| trusted.contains(o))
                        .count();
                    ensure(count == m, || {
                        format!("m={m} n={n} seed={seed}: {t} holds {count} trusted models")
                    })?;
                    for (origin, model) in &e.state.inbox[t] {
                        ensure(model == &e.state.local[origin], || {
                            format!("{t} holds a corrupted copy of {origin}")
                        })?;
                    }
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} rings, every trusted node complete after exactly m-1 steps"
    ))
}

fn routing_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut queries = 0;
    for r in 0..200 {
        let m = rng.random_range(1..=6);
        let u = rng.random_range(0..=20);
        let vnodes = [0, 1, 8, 64][r % 4];
        let (nodes, ring) = random_ring(&mut rng, m, u, vnodes);
        let plain: Vec<(String, bool)> = nodes
            .iter()
            .map(|(id, role)| (id.to_string(), role.is_trusted()))
            .collect();
        let entries = oracle_entries(&plain, vnodes);
        for (id, trusted) in &plain {
            let pos = fnv1a_oracle(id);
            let node = NodeId::new(id.as_str());
            let want = &oracle_scan(&entries, pos, |e| e.trusted).owner;
            let got = ring.route_to_trusted(&node).map_err(|e| e.to_string())?;
            ensure(got.as_str() == want, || {
                format!("ring {r}: route_to_trusted({id}) = {got}, oracle {want}")
            })?;
            if *trusted {
                let want = &oracle_scan(&entries, pos, |e| e.trusted && e.real).owner;
                let got = ring.next_trusted(&node).map_err(|e| e.to_string())?;
                ensure(got.as_str() == want, || {
                    format!("ring {r}: next_trusted({id}) = {got}, oracle {want}")
                })?;
            }
            queries += 1;
        }
    }
    Ok(format!(
        "200 rings, {queries} nodes routed identically to the sorted-scan oracle"
    ))
}

fn balance() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let (_, ring) = random_ring(&mut rng, 5, 100, 64);
        let mut load: BTreeMap<NodeId, usize> =
            ring.trusted().into_iter().map(|t| (t, 0)).collect();
        for u in ring.untrusted() {
            *load
                .get_mut(&ring.route_to_trusted(&u).map_err(|e| e.to_string())?)
                .unwrap() += 1;
        }
        let max = *load.values().max().unwrap() as f64;
        let min = *load.values().min().unwrap() as f64;
        ratios.push(if min == 0.0 { f64::INFINITY } else { max / min });
    }
    let good = ratios.iter().filter(|r| **r <= 3.0).count();
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    ensure(good >= 18, || {
        format!("only {good}/20 seeds have max/min load <= 3 (worst {worst:.2})")
    })?;
    Ok(format!(
        "{good}/20 seeds with max/min trusted load <= 3 (worst {worst:.2})"
    ))
}

fn fd_check(
    model: &ModelParams,
    loss: impl Fn(&ModelParams) -> f64,
    analytic: &[f64],
) -> Result<f64, String> {
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        plus.values_mut()[i] += eps;
        let mut minus = model.clone();
        minus.values_mut()[i] -= eps;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        ensure(rel < 1e-4, || {
            format!("param {i}: analytic {a} numeric {numeric}")
        })?;
    }
    Ok(worst)
}

fn random_model(rng: &mut ChaCha8Rng, shapes: &[usize]) -> ModelParams {
    let mut m = init_model(shapes, rng.random()).unwrap();
    for v in m.values_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    m
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize) -> Dataset {
    let features = (0..rows * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..3)).collect();
    Dataset::new(2, features, labels, 3).unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
    softmax_t(&logits, 1.0)
}

fn numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shapes = [2, 4, 3];
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let model = random_model(&mut rng, &shapes);
        let batch = random_batch(&mut rng, 6);
        let ce = ce_loss(&model, &batch).map_err(|e| e.to_string())?;
        worst = worst.max(
            fd_check(&model, |m| ce_loss(m, &batch).unwrap().loss, &ce.grad)
                .map_err(|e| format!("ce case {case}: {e}"))?,
        );

        let teachers: Vec<ModelParams> = (0..rng.random_range(1..=3))
            .map(|_| random_model(&mut rng, &shapes))
            .collect();
        let refs: Vec<&ModelParams> = teachers.iter().collect();
        let t = rng.random_range(1.0..4.0);
        let dl = distill_loss(&model, &refs, &batch, t).map_err(|e| e.to_string())?;
        worst = worst.max(
            fd_check(
                &model,
                |m| distill_loss(m, &refs, &batch, t).unwrap().loss,
                &dl.grad,
            )
            .map_err(|e| format!("distill case {case}: {e}"))?,
        );
    }

    for i in 0..1000 {
        let k = rng.random_range(2..=10);
        let p = random_distribution(&mut rng, k);
        let q = random_distribution(&mut rng, k);
        let kl = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        ensure(kl >= 0.0, || format!("pair {i}: KL = {kl}"))?;
    }

    for case in 0..50 {
        let n = rng.random_range(1..=6);
        let models: Vec<ModelParams> = (0..n).map(|_| random_model(&mut rng, &shapes)).collect();
        let avg = average_params(&models.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        for j in 0..avg.values().len() {
            let oracle = models.iter().map(|m| m.values()[j]).sum::<f64>() / n as f64;
            let got = avg.values()[j];
            ensure((got - oracle).abs() <= 1e-12, || {
                format!("average case {case} elem {j}: {got} vs {oracle}")
            })?;
        }
    }
    Ok(format!(
        "worst gradient rel err {worst:.2e}; 1000 KL pairs >= 0; averages within 1e-12"
    ))
}

fn poisoning_robustness() -> Outcome {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (t, m, need) in [(2, 3, Some(5.0)), (3, 2, None), (4, 1, Some(2.0))] {
        let (rdfl, fedavg) = arm_means(|seed, arm| accuracy_config(t, m, seed, arm))?;
        let gap = rdfl - fedavg;
        parts.push(format!(
            "{t}:{m} rdfl {rdfl:.2} fedavg {fedavg:.2} gap {gap:+.2}"
        ));
        if let Some(need) = need {
            if gap < need {
                failures.push(format!("{t}:{m} gap {gap:.2} < {need}"));
            }
        }
    }
    let report = parts.join("; ");
    ensure(failures.is_empty(), || {
        format!("{} ({report})", failures.join(", "))
    })?;
    Ok(report)
}

fn no_poisoning_parity() -> Outcome {
    let (rdfl, fedavg) = arm_means(|seed, arm| accuracy_config(5, 0, seed, arm))?;
    let report = format!("5:0 rdfl {rdfl:.2} fedavg {fedavg:.2}");
    ensure(rdfl >= fedavg - 1.0, || {
        format!("rdfl more than 1 point below fedavg: {report}")
    })?;
    Ok(report)
}

fn non_iid_direction() -> Outcome {
    let (rdfl, fedavg) = arm_means(|seed, arm| ExperimentConfig {
        n_classes: 10,
        scheme: Scheme::LabelPartition {
            classes_per_node: 2,
        },
        ..accuracy_config(5, 0, seed, arm)
    })?;
    let report = format!("label partition rdfl {rdfl:.2} fedavg {fedavg:.2}");
    ensure(rdfl >= fedavg, || format!("rdfl below fedavg: {report}"))?;
    Ok(report)
}

fn comm_config(transport: TransportMode) -> ExperimentConfig {
    ExperimentConfig {
        rounds: 50,
        transport,
        per_class: 40,
        test_per_class: 20,
        hidden: vec![32],
        train: TrainConfig {
            lr: 0.01,
            batch_size: 32,
            local_epochs: 1,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn communication_shape() -> Outcome {
    let direct = run_experiment(&comm_config(TransportMode::Direct)).map_err(|e| e.to_string())?;
    let cas =
        run_experiment(&comm_config(TransportMode::ContentAddressed)).map_err(|e| e.to_string())?;
    let report = communication_report(&direct, &cas).map_err(|e| e.to_string())?;
    let at5 = report.direct_cumulative_at(5).unwrap();
    let at50 = report.direct_cumulative_at(50).unwrap();
    ensure(report.direct_is_linear(5, 50), || {
        format!(
            "direct bytes at 50 rounds {at50} vs 10 x {at5} (model {} bytes)",
            report.model_bytes
        )
    })?;
    ensure(report.cas_direct_constant_after_first(), || {
        let per: Vec<usize> = report.cas_per_round.iter().map(|c| c.direct).collect();
        format!("cas direct bytes vary after round 1: {per:?}")
    })?;
    let ratio = report.ratio_at(50).unwrap();
    ensure(ratio >= 10.0, || {
        format!("ratio at 50 rounds {ratio:.2} < 10")
    })?;
    Ok(format!(
        "direct {at5} -> {at50} bytes (5 -> 50 rounds); cas per round {} after round 1; ratio@50 {ratio:.2}",
        report.cas_per_round[1].direct
    ))
}

fn cas_engine(rounds: usize, seed: u64) -> Result<Engine, String> {
    let cfg = ExperimentConfig {
        transport: TransportMode::ContentAddressed,
        master_seed: seed,
        n_nodes: 6,
        n_trusted: 3,
        n_malicious: 2,
        per_class: 20,
        test_per_class: 5,
        hidden: vec![6],
        ..ExperimentConfig::default()
    };
    let w = sim::build_workload(&cfg).map_err(|e| e.to_string())?;
    let ring = build_ring(&w.nodes, cfg.vnodes).map_err(|e| e.to_string())?;
    let ecfg = EngineConfig {
        train: TrainConfig {
            lr: 0.05,
            local_epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        },
        master_seed: seed,
        ..EngineConfig::default()
    };
    let mut e = Engine::new(
        ring,
        w.shards,
        w.initial,
        ecfg,
        TransportMode::ContentAddressed,
    )
    .map_err(|e| e.to_string())?;
    for _ in 0..rounds {
        e.run_round().map_err(|e| e.to_string())?;
    }
    Ok(e)
}

fn ledger_integrity() -> Outcome {
    let e = cas_engine(3, 11)?;
    let cas = e.transport().cas().unwrap();
    let ledger = &cas.ledger;
    ensure(ledger.verify_chain() == ChainStatus::Ok, || {
        "untampered chain fails verification".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut kinds = BTreeMap::<&str, usize>::new();
    for i in 0..100 {
        let target = rng.random_range(0..ledger.len());
        let mut copy = ledger.clone();
        let field = rng.random_range(0..7);
        let bit = rng.random_range(0..8u32);
        let pick: u64 = rng.random();
        let mut name = "";
        copy.tamper(target, |b| {
            let tx_i = (pick as usize) % b.txs.len();
            match field {
                0 => {
                    b.index ^= 1 << (pick % 64);
                    name = "index";
                }
                1 => {
                    b.prev_digest[(pick % 32) as usize] ^= 1 << bit;
                    name = "prev";
                }
                2 => {
                    b.digest[(pick % 32) as usize] ^= 1 << bit;
                    name = "digest";
                }
                3 => {
                    b.txs[tx_i].round ^= 1 << (pick % 64);
                    name = "round";
                }
                4 => {
                    let p = &mut b.txs[tx_i].payload;
                    let at = (pick as usize) % p.len();
                    p[at] ^= 1 << bit;
                    name = "payload";
                }
                5 => {
                    let flipped: String = b.txs[tx_i]
                        .sender
                        .as_str()
                        .bytes()
                        .enumerate()
                        .map(|(j, c)| {
                            if j == 0 {
                                (c ^ (1 << (bit % 7))) as char
                            } else {
                                c as char
                            }
                        })
                        .collect();
                    b.txs[tx_i].sender = NodeId::new(flipped);
                    name = "sender";
                }
                _ => {
                    let t = &mut b.txs[tx_i];
                    t.kind = match t.kind {
                        TxKind::ModelPublish => TxKind::GlobalPublish,
                        TxKind::GlobalPublish => TxKind::ModelPublish,
                        TxKind::TaskControl => TxKind::ModelPublish,
                    };
                    name = "kind";
                }
            }
        });
        *kinds.entry(name).or_default() += 1;
        match copy.verify_chain() {
            ChainStatus::BadBlock(at) if at <= target => {}
            other => {
                return Err(format!(
                    "injection {i} ({name} in block {target}) gave {other:?}"
                ))
            }
        }
    }

    let tx_events: Vec<_> = e
        .state
        .events
        .iter()
        .filter(|ev| ev.kind == TransferKind::Tx)
        .collect();
    let hash_events: Vec<_> = e
        .state
        .events
        .iter()
        .filter(|ev| ev.kind == TransferKind::Hash)
        .collect();
    let trace = ledger
        .trace(&cas.task_id, &TraceFilter::default())
        .map_err(|e| e.to_string())?;
    ensure(trace.len() == tx_events.len(), || {
        format!(
            "trace {} entries, log {} tx events",
            trace.len(),
            tx_events.len()
        )
    })?;
    for ((entry, tx), hash) in trace.iter().zip(&tx_events).zip(&hash_events) {
        let kind = if tx.phase == Phase::Broadcast {
            TxKind::GlobalPublish
        } else {
            TxKind::ModelPublish
        };
        let same = entry.sender.as_str() == tx.from
            && entry.round == tx.round as u64
            && entry.kind == kind
            && entry.payload.len() == hash.bytes
            && hash.from == tx.from;
        ensure(same, || {
            format!("trace entry {entry:?} does not match event {tx} / {hash}")
        })?;
    }
    for node in e.ring().members() {
        let mine = ledger
            .trace(
                &cas.task_id,
                &TraceFilter {
                    sender: Some(node.clone()),
                    round: Some(2),
                },
            )
            .map_err(|e| e.to_string())?;
        let logged = tx_events
            .iter()
            .filter(|ev| ev.from == node.as_str() && ev.round == 2)
            .count();
        ensure(mine.len() == logged, || {
            format!(
                "filtered trace for {node} round 2: {} vs {logged}",
                mine.len()
            )
        })?;
    }
    Ok(format!(
        "100/100 injections detected ({kinds:?}); trace matches {} logged txs",
        trace.len()
    ))
}

fn envelope() -> Outcome {
    let mut keys = KeyRegistry::new(5, Suite::standard());
    let (a, b, c) = (NodeId::new("a"), NodeId::new("b"), NodeId::new("c"));
    for n in [&a, &b, &c] {
        keys.register(n).map_err(|e| e.to_string())?;
    }
    let ab = keys
        .establish(&a, &b, 1)
        .map_err(|e| e.to_string())?
        .session;
    let ac = keys
        .establish(&a, &c, 1)
        .map_err(|e| e.to_string())?
        .session;
    for i in 0..1000u32 {
        let h = ContentHash::of(&i.to_le_bytes());
        let sealed = keys.seal(&ab, &h);
        ensure(keys.open(&ab, &sealed).as_ref() == Ok(&h), || {
            format!("round trip {i} failed")
        })?;
        ensure(keys.open(&ac, &sealed).is_err(), || {
            format!("cross-session open {i} succeeded")
        })?;
        ensure(ContentHash::parse_bytes(&sealed).is_err(), || {
            format!("sealed {i} parses as plaintext")
        })?;
    }

    let e = cas_engine(3, 21)?;
    let cas = e.transport().cas().unwrap();
    let mut pairs: HashMap<(String, String), usize> = HashMap::new();
    for ev in e
        .state
        .events
        .iter()
        .filter(|ev| ev.kind == TransferKind::Handshake)
    {
        ensure(ev.round == 1, || format!("handshake in round {}", ev.round))?;
        *pairs.entry((ev.to.clone(), ev.from.clone())).or_default() += 1;
    }
    let mut used = BTreeSet::new();
    for ev in e
        .state
        .events
        .iter()
        .filter(|ev| ev.kind == TransferKind::Hash)
    {
        used.insert((ev.from.clone(), ev.to.clone()));
    }
    ensure(pairs.values().all(|c| *c == 1), || {
        "an ordered pair handshook more than once".into()
    })?;
    ensure(
        pairs.len() == used.len() && used.iter().all(|p| pairs.contains_key(p)),
        || {
            format!(
                "{} handshakes for {} communicating pairs",
                pairs.len(),
                used.len()
            )
        },
    )?;
    ensure(cas.keys.handshake_count() == pairs.len(), || {
        "registry and log disagree on handshakes".into()
    })?;

    let mut publishes = 0;
    for block in cas.ledger.blocks() {
        for tx in block.txs.iter().filter(|t| t.kind == TxKind::ModelPublish) {
            ensure(is_sealed(&tx.payload), || {
                format!("block {} payload is not an envelope", block.index)
            })?;
            ensure(ContentHash::parse_bytes(&tx.payload).is_err(), || {
                format!("block {} payload is plaintext", block.index)
            })?;
            publishes += 1;
        }
    }
    Ok(format!(
        "1000 round trips; 1000 cross-session opens rejected; {} ordered pairs, one handshake each; {publishes} publish payloads sealed",
        pairs.len()
    ))
}

fn determinism() -> Outcome {
    let base = ExperimentConfig {
        rounds: 6,
        per_class: 60,
        test_per_class: 50,
        hidden: vec![16],
        master_seed: 17,
        train: TrainConfig {
            lr: 0.05,
            batch_size: 32,
            local_epochs: 2,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    for k in 0..2 {
        let out = run_experiment(&base).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("run{k}"));
        sim::write_outputs(&out, &path).map_err(|e| e.to_string())?;
        csvs.push(std::fs::read(path.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    ensure(csvs[0] == csvs[1], || {
        "metrics.csv differs between identical runs".into()
    })?;

    let mut checked = 0;
    for seed in [1u64, 2, 3] {
        let d = run_experiment(&ExperimentConfig {
            master_seed: seed,
            ..base.clone()
        })
        .map_err(|e| e.to_string())?;
        let c = run_experiment(&ExperimentConfig {
            master_seed: seed,
            transport: TransportMode::ContentAddressed,
            ..base.clone()
        })
        .map_err(|e| e.to_string())?;
        ensure(d.trajectory == c.trajectory, || {
            format!("seed {seed}: trajectories differ")
        })?;
        ensure(d.final_model.values() == c.final_model.values(), || {
            format!("seed {seed}: final models differ")
        })?;
        checked += d.trajectory.len();
    }
    Ok(format!("metrics.csv byte-identical ({} bytes); {checked} global models bit-identical across transports", csvs[0].len()))
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [Criterion; 11] = [
        (
            "sync completeness",
            Duration::from_secs(10),
            sync_completeness,
        ),
        (
            "ring routing oracle",
            Duration::from_secs(5),
            routing_oracle,
        ),
        ("trusted load balance", Duration::from_secs(5), balance),
        ("numerics", Duration::from_secs(30), numerics),
        (
            "poisoning robustness",
            Duration::from_secs(300),
            poisoning_robustness,
        ),
        (
            "no-poisoning parity",
            Duration::from_secs(120),
            no_poisoning_parity,
        ),
        (
            "non-iid direction",
            Duration::from_secs(120),
            non_iid_direction,
        ),
        (
            "communication shape",
            Duration::from_secs(60),
            communication_shape,
        ),
        (
            "ledger integrity",
            Duration::from_secs(10),
            ledger_integrity,
        ),
        ("envelope", Duration::from_secs(10), envelope),
        (
            "determinism and transport equivalence",
            Duration::from_secs(120),
            determinism,
        ),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= *budget => (true, d),
            Ok(d) => (false, format!("over budget; {d}")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {name} [{:.2}s / {}s]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
