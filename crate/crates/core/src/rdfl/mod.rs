//! Round engine.
//!
//! One round runs four barriered phases in order:
//!
//! 1. every node trains on its copy of the global model; untrusted nodes
//!    forward their model to the trusted node found clockwise;
//! 2. trusted nodes pipeline their own models around the trusted sub-ring
//!    for `m - 1` steps so each holds all `m`;
//! 3. each trusted node scores the models it holds by KL divergence, distils
//!    from the closest fraction, drops everything but its own model, and the
//!    distilled models are pipelined again for `m - 1` steps;
//! 4. each trusted node averages the `m` distilled models and the result is
//!    relayed counterclockwise to the untrusted members.
//!
//! Delivery goes through a [`Transport`]; both modes hand the receiver a
//! bit-identical model, so only the event log differs between them.

mod baseline;
mod events;
mod teachers;
mod transport;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::castore::StoreError;
use crate::config::{DistillConfig, TrainConfig};
use crate::hashring::{NodeId, Ring, RingError};
use crate::ledger::LedgerError;
use crate::sealed::{SealError, Suite};
use crate::seeds::derive_seed;
use crate::tinynn::{average_params, train_distill, train_local, Dataset, ModelParams, NnError};

pub use baseline::FedAvgBaseline;
pub use events::{format_event_log, Channel, ChannelBytes, Phase, TransferEvent, TransferKind};
pub use teachers::{select_teachers, teacher_score, TeacherScore};
pub use transport::{CasStack, Payload, Transport, TransportMode, LEDGER_ENDPOINT, STORE_ENDPOINT};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error("no data shard for node {0}")]
    MissingShard(NodeId),
    #[error("trusted nodes disagree on the global model in round {0}")]
    GlobalDisagreement(usize),
    #[error("phase called out of order: expected {expected:?}, state is {actual:?}")]
    PhaseOrder { expected: Stage, actual: Stage },
}

/// Where the current round stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Every node holds the latest global model.
    Ready,
    Forwarded,
    Synced,
    Distilled,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub master_seed: u64,
    pub task_id: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            master_seed: 0,
            task_id: "task-0".into(),
        }
    }
}

/// Teacher choice made by one trusted node in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherChoice {
    pub round: usize,
    pub node: NodeId,
    pub candidates: usize,
    pub selected: Vec<TeacherScore>,
}

/// Models held by one node, tagged by the node they originated at.
pub type Holdings = Vec<(NodeId, ModelParams)>;

#[derive(Debug, Clone)]
pub struct ProtocolState {
    /// Current round, 1-based once the first round starts.
    pub round: usize,
    pub stage: Stage,
    pub local: BTreeMap<NodeId, ModelParams>,
    /// The global model each node currently holds.
    pub global: BTreeMap<NodeId, ModelParams>,
    /// Candidate pool per trusted node during phases 1-3.
    pub inbox: BTreeMap<NodeId, Holdings>,
    /// Post-distillation models per trusted node after the second sync.
    pub resynced: BTreeMap<NodeId, Holdings>,
    /// Pipelined sync steps executed in the current sync.
    pub sync_steps: usize,
    pending: BTreeMap<NodeId, (NodeId, ModelParams)>,
    pub events: Vec<TransferEvent>,
    pub teacher_log: Vec<TeacherChoice>,
}

pub(crate) fn stream_seed(master: u64, label: &str, round: usize, node: &NodeId) -> u64 {
    derive_seed(
        master,
        &[
            label.as_bytes(),
            &(round as u64).to_le_bytes(),
            node.as_str().as_bytes(),
        ],
    )
}

pub struct Engine {
    ring: Ring,
    trusted: Vec<NodeId>,
    shards: BTreeMap<NodeId, Dataset>,
    cfg: EngineConfig,
    transport: Transport,
    pub state: ProtocolState,
}

impl Engine {
    pub fn new(
        ring: Ring,
        shards: BTreeMap<NodeId, Dataset>,
        initial: ModelParams,
        cfg: EngineConfig,
        mode: TransportMode,
    ) -> Result<Self, EngineError> {
        Self::with_suite(ring, shards, initial, cfg, mode, Suite::standard())
    }

    pub fn with_suite(
        ring: Ring,
        shards: BTreeMap<NodeId, Dataset>,
        initial: ModelParams,
        cfg: EngineConfig,
        mode: TransportMode,
        suite: Suite,
    ) -> Result<Self, EngineError> {
        cfg.train.validate()?;
        cfg.distill.validate()?;
        for id in ring.members() {
            if !shards.contains_key(id) {
                return Err(EngineError::MissingShard(id.clone()));
            }
        }
        let seal_seed = derive_seed(cfg.master_seed, &[b"sealed"]);
        let transport = Transport::new(mode, ring.members(), &cfg.task_id, seal_seed, suite)?;
        let global = ring
            .members()
            .map(|id| (id.clone(), initial.clone()))
            .collect();
        let trusted = ring.trusted();
        Ok(Self {
            ring,
            trusted,
            shards,
            cfg,
            transport,
            state: ProtocolState {
                round: 0,
                stage: Stage::Ready,
                local: BTreeMap::new(),
                global,
                inbox: BTreeMap::new(),
                resynced: BTreeMap::new(),
                sync_steps: 0,
                pending: BTreeMap::new(),
                events: Vec::new(),
                teacher_log: Vec::new(),
            },
        })
    }

    pub fn ring(&self) -> &Ring {
        &self.ring
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    /// Trusted real nodes in clockwise order.
    pub fn trusted(&self) -> &[NodeId] {
        &self.trusted
    }

    fn expect_stage(&self, expected: Stage) -> Result<(), EngineError> {
        if self.state.stage != expected {
            return Err(EngineError::PhaseOrder {
                expected,
                actual: self.state.stage,
            });
        }
        Ok(())
    }

    /// The global model, as held by the first trusted node.
    pub fn global_model(&self) -> &ModelParams {
        &self.state.global[&self.trusted[0]]
    }

    /// Runs one full round.
    pub fn run_round(&mut self) -> Result<(), EngineError> {
        self.phase_train_and_forward()?;
        self.sync_trusted()?;
        self.phase_distill_and_resync()?;
        self.phase_fedavg_and_broadcast()
    }

    /// Starts round `t + 1`: local training everywhere, then forwarding.
    pub fn phase_train_and_forward(&mut self) -> Result<(), EngineError> {
        self.expect_stage(Stage::Ready)?;
        self.state.round += 1;
        let round = self.state.round;
        let members: Vec<NodeId> = self.ring.members().cloned().collect();
        let mut local = BTreeMap::new();
        for id in &members {
            let cfg =
                self.cfg
                    .train
                    .with_seed(stream_seed(self.cfg.master_seed, "train", round, id));
            local.insert(
                id.clone(),
                train_local(&self.state.global[id], &self.shards[id], &cfg)?,
            );
        }
        self.state.local = local;
        self.forward_untrusted()
    }

    /// Fills each trusted inbox with its own model plus the models of the
    /// untrusted nodes routed to it. Uses whatever `state.local` holds.
    pub fn forward_untrusted(&mut self) -> Result<(), EngineError> {
        let round = self.state.round;
        self.state.inbox = self
            .trusted
            .iter()
            .map(|t| (t.clone(), vec![(t.clone(), self.state.local[t].clone())]))
            .collect();
        for u in self.ring.untrusted() {
            let host = self.ring.route_to_trusted(&u)?;
            let received = self.transport.deliver(
                &mut self.state.events,
                round,
                Phase::Forward,
                &u,
                &host,
                &self.state.local[&u],
                Payload::Local,
            )?;
            self.state.inbox.get_mut(&host).unwrap().push((u, received));
        }
        self.state.stage = Stage::Forwarded;
        Ok(())
    }

    /// Primes a pipelined sync: every trusted node will first send its own
    /// local model to its trusted successor.
    pub fn begin_sync(&mut self) {
        self.state.pending = self
            .trusted
            .iter()
            .map(|t| (t.clone(), (t.clone(), self.state.local[t].clone())))
            .collect();
        self.state.sync_steps = 0;
    }

    /// One pipelined step: each trusted node passes the model it received last
    /// (its own on the first step) to `next_trusted`.
    pub fn sync_step(&mut self, phase: Phase) -> Result<(), EngineError> {
        let round = self.state.round;
        let mut next_pending = BTreeMap::new();
        for t in &self.trusted {
            let succ = self.ring.next_trusted(t)?;
            let (origin, model) = &self.state.pending[t];
            let received = self.transport.deliver(
                &mut self.state.events,
                round,
                phase,
                t,
                &succ,
                model,
                Payload::Local,
            )?;
            let holdings = match phase {
                Phase::Resync => &mut self.state.resynced,
                _ => &mut self.state.inbox,
            };
            holdings
                .get_mut(&succ)
                .expect("holdings primed for every trusted node")
                .push((origin.clone(), received.clone()));
            next_pending.insert(succ, (origin.clone(), received));
        }
        self.state.pending = next_pending;
        self.state.sync_steps += 1;
        Ok(())
    }

    /// `m - 1` pipelined steps over the trusted sub-ring.
    pub fn sync_trusted(&mut self) -> Result<(), EngineError> {
        self.expect_stage(Stage::Forwarded)?;
        self.begin_sync();
        for _ in 1..self.trusted.len() {
            self.sync_step(Phase::Sync)?;
        }
        self.state.stage = Stage::Synced;
        Ok(())
    }

    /// Probe batch for teacher scoring: the first seeded batch of the shard.
    pub fn probe_batch(&self, node: &NodeId) -> Dataset {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let shard = &self.shards[node];
        let mut order: Vec<usize> = (0..shard.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(
            self.cfg.master_seed,
            "probe",
            self.state.round,
            node,
        ));
        order.shuffle(&mut rng);
        order.truncate(self.cfg.train.batch_size);
        shard.select(&order)
    }

    /// Teacher selection and distillation on every trusted node, then the
    /// second sync of the distilled models.
    pub fn phase_distill_and_resync(&mut self) -> Result<(), EngineError> {
        self.expect_stage(Stage::Synced)?;
        let round = self.state.round;
        for t in self.trusted.clone() {
            let inbox = self.state.inbox.remove(&t).unwrap_or_default();
            let candidates: Holdings = inbox
                .into_iter()
                .filter(|(origin, _)| *origin != t)
                .collect();
            let local = &self.state.local[&t];
            let probe = self.probe_batch(&t);
            let selected = select_teachers(local, &candidates, round, &self.cfg.distill, &probe)?;
            let teacher_refs: Vec<&ModelParams> = selected
                .iter()
                .map(|s| {
                    &candidates
                        .iter()
                        .find(|(origin, _)| *origin == s.origin)
                        .expect("selected from candidates")
                        .1
                })
                .collect();
            let cfg =
                self.cfg
                    .train
                    .with_seed(stream_seed(self.cfg.master_seed, "distill", round, &t));
            let distilled = train_distill(
                local,
                &teacher_refs,
                &self.shards[&t],
                &cfg,
                &self.cfg.distill,
                self.cfg.distill.epochs,
            )?;
            self.state.teacher_log.push(TeacherChoice {
                round,
                node: t.clone(),
                candidates: candidates.len(),
                selected,
            });
            self.state.local.insert(t, distilled);
        }
        self.state.inbox.clear();

        self.state.resynced = self
            .trusted
            .iter()
            .map(|t| (t.clone(), vec![(t.clone(), self.state.local[t].clone())]))
            .collect();
        self.begin_sync();
        for _ in 1..self.trusted.len() {
            self.sync_step(Phase::Resync)?;
        }
        self.state.stage = Stage::Distilled;
        Ok(())
    }

    /// Every trusted node averages its `m` distilled models in ring order;
    /// the global model then walks counterclockwise through untrusted members.
    pub fn phase_fedavg_and_broadcast(&mut self) -> Result<(), EngineError> {
        self.expect_stage(Stage::Distilled)?;
        let round = self.state.round;
        let rank: BTreeMap<&NodeId, usize> = self
            .trusted
            .iter()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        let mut agreed: Option<ModelParams> = None;
        for t in &self.trusted {
            let mut held: Vec<&(NodeId, ModelParams)> = self.state.resynced[t].iter().collect();
            held.sort_by_key(|(origin, _)| rank[origin]);
            let gm = average_params(&held.iter().map(|(_, m)| m).collect::<Vec<_>>())?;
            match &agreed {
                Some(prev) if prev.values() != gm.values() => {
                    return Err(EngineError::GlobalDisagreement(round));
                }
                Some(_) => {}
                None => agreed = Some(gm.clone()),
            }
            self.state.global.insert(t.clone(), gm);
        }
        for t in &self.trusted {
            let mut current = t.clone();
            loop {
                let prev = self.ring.prev_member(&current)?;
                if self.ring.role(&prev).is_some_and(|r| r.is_trusted()) {
                    break;
                }
                let gm = self.state.global[&current].clone();
                let received = self.transport.deliver(
                    &mut self.state.events,
                    round,
                    Phase::Broadcast,
                    &current,
                    &prev,
                    &gm,
                    Payload::Global,
                )?;
                self.state.global.insert(prev.clone(), received);
                current = prev;
            }
        }
        self.state.stage = Stage::Ready;
        Ok(())
    }
}
