//! Experiment harness: config parsing, the two arms, per-round metrics and
//! communication accounting.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{DistillConfig, TrainConfig};
use crate::hashring::{build_ring, NodeId, NodeRole, DEFAULT_VNODES};
use crate::partition::{self, PartitionError, PartitionSpec, Scheme, DEFAULT_DIRICHLET_ALPHA};
use crate::rdfl::{
    ChannelBytes, Engine, EngineConfig, EngineError, FedAvgBaseline, TransferEvent, TransportMode,
};
use crate::seeds::derive_seed;
use crate::tinynn::{evaluate, init_model, Dataset, ModelParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{field}: {message}")]
    Field {
        field: &'static str,
        message: String,
    },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

fn field_err(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("runs are not comparable: {0}")]
    MismatchedRuns(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::tinynn::NnError> for SimError {
    fn from(e: crate::tinynn::NnError) -> Self {
        SimError::Engine(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Rdfl,
    FedAvg,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Rdfl => "rdfl",
            Arm::FedAvg => "fedavg",
        }
    }
}

impl FromStr for Arm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rdfl" => Ok(Arm::Rdfl),
            "fedavg" => Ok(Arm::FedAvg),
            _ => Err(format!("expected rdfl|fedavg, got `{s}`")),
        }
    }
}

pub fn parse_transport(s: &str) -> Result<TransportMode, String> {
    match s {
        "direct" => Ok(TransportMode::Direct),
        "cas" => Ok(TransportMode::ContentAddressed),
        _ => Err(format!("expected direct|cas, got `{s}`")),
    }
}

/// Everything one run needs. Node `i` is `10.0.0.{i+1}`; the first
/// `n_trusted` nodes are trusted and the next `n_malicious` hold poisoned
/// shards. The remaining nodes are untrusted but honest.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_nodes: usize,
    pub n_trusted: usize,
    pub n_malicious: usize,
    pub scheme: Scheme,
    pub rounds: usize,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub transport: TransportMode,
    pub arm: Arm,
    pub master_seed: u64,
    pub n_classes: usize,
    /// Training samples per class, before partitioning.
    pub per_class: usize,
    pub spread: f64,
    pub test_per_class: usize,
    pub hidden: Vec<usize>,
    pub vnodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_nodes: 5,
            n_trusted: 3,
            n_malicious: 2,
            scheme: Scheme::Iid,
            rounds: 15,
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            transport: TransportMode::Direct,
            arm: Arm::Rdfl,
            master_seed: 0,
            n_classes: 4,
            per_class: 200,
            spread: 1.0,
            test_per_class: 250,
            hidden: vec![32],
            vnodes: DEFAULT_VNODES,
        }
    }
}

fn num<T: FromStr>(field: &'static str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| field_err(field, format!("cannot parse `{v}`")))
}

impl ExperimentConfig {
    /// Flat `key = value` text; `#` starts a comment. Unset keys keep their
    /// defaults. The result is validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut partition = "iid".to_owned();
        let mut alpha = DEFAULT_DIRICHLET_ALPHA;
        let mut classes_per_node = 2usize;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "n_nodes" => c.n_nodes = num("n_nodes", v)?,
                "n_trusted" => c.n_trusted = num("n_trusted", v)?,
                "n_malicious" => c.n_malicious = num("n_malicious", v)?,
                "partition" => partition = v.to_owned(),
                "alpha" => alpha = num("alpha", v)?,
                "classes_per_node" => classes_per_node = num("classes_per_node", v)?,
                "rounds" => c.rounds = num("rounds", v)?,
                "lr" => c.train.lr = num("lr", v)?,
                "weight_decay" => c.train.weight_decay = num("weight_decay", v)?,
                "batch_size" => c.train.batch_size = num("batch_size", v)?,
                "local_epochs" => c.train.local_epochs = num("local_epochs", v)?,
                "temperature" => c.distill.temperature = num("temperature", v)?,
                "base_teacher_frac" => c.distill.base_teacher_frac = num("base_teacher_frac", v)?,
                "max_teacher_frac" => c.distill.max_teacher_frac = num("max_teacher_frac", v)?,
                "teacher_growth" => c.distill.growth_per_round = num("teacher_growth", v)?,
                "distill_epochs" => c.distill.epochs = num("distill_epochs", v)?,
                "transport" => {
                    c.transport = parse_transport(v).map_err(|m| field_err("transport", m))?
                }
                "arm" => c.arm = v.parse().map_err(|m: String| field_err("arm", m))?,
                "seed" => c.master_seed = num("seed", v)?,
                "n_classes" => c.n_classes = num("n_classes", v)?,
                "per_class" => c.per_class = num("per_class", v)?,
                "spread" => c.spread = num("spread", v)?,
                "test_per_class" => c.test_per_class = num("test_per_class", v)?,
                "vnodes" => c.vnodes = num("vnodes", v)?,
                "hidden" => {
                    c.hidden = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',')
                            .map(|h| num("hidden", h.trim()))
                            .collect::<Result<_, _>>()?
                    }
                }
                other => return Err(ConfigError::UnknownKey(other.to_owned())),
            }
        }
        c.scheme = match partition.as_str() {
            "iid" => Scheme::Iid,
            "dirichlet" => Scheme::Dirichlet { alpha },
            "label" => Scheme::LabelPartition { classes_per_node },
            other => {
                return Err(field_err(
                    "partition",
                    format!("expected iid|dirichlet|label, got `{other}`"),
                ))
            }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_nodes == 0 {
            return Err(field_err("n_nodes", "must be at least 1"));
        }
        if self.n_trusted > self.n_nodes {
            return Err(field_err("n_trusted", "exceeds n_nodes"));
        }
        if self.n_malicious > self.n_nodes - self.n_trusted {
            return Err(field_err("n_malicious", "exceeds n_nodes - n_trusted"));
        }
        if self.arm == Arm::Rdfl && self.n_trusted == 0 {
            return Err(field_err(
                "n_trusted",
                "rdfl needs at least one trusted node",
            ));
        }
        if self.n_classes < 2 {
            return Err(field_err("n_classes", "must be at least 2"));
        }
        if self.per_class == 0 {
            return Err(field_err("per_class", "must be positive"));
        }
        if self.test_per_class == 0 {
            return Err(field_err("test_per_class", "must be positive"));
        }
        if !self.spread.is_finite() || self.spread <= 0.0 {
            return Err(field_err("spread", "must be positive"));
        }
        if let Scheme::Dirichlet { alpha } = self.scheme {
            if alpha.is_nan() || alpha <= 0.0 {
                return Err(field_err("alpha", "must be positive"));
            }
        }
        if let Scheme::LabelPartition { classes_per_node } = self.scheme {
            if classes_per_node == 0 || self.n_nodes * classes_per_node > self.n_classes {
                return Err(field_err(
                    "classes_per_node",
                    "n_nodes * classes_per_node must be between 1 and n_classes",
                ));
            }
        }
        if self.hidden.contains(&0) {
            return Err(field_err("hidden", "layer widths must be positive"));
        }
        self.train
            .validate()
            .map_err(|e| field_err("train", e.to_string()))?;
        self.distill
            .validate()
            .map_err(|e| field_err("distill", e.to_string()))?;
        Ok(())
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        (0..self.n_nodes)
            .map(|i| NodeId::new(format!("10.0.0.{}", i + 1)))
            .collect()
    }

    pub fn role_of(&self, i: usize) -> NodeRole {
        if i < self.n_trusted {
            NodeRole::TRUSTED
        } else if i < self.n_trusted + self.n_malicious {
            NodeRole::MALICIOUS
        } else {
            NodeRole::UNTRUSTED
        }
    }

    pub fn shapes(&self) -> Vec<usize> {
        let mut s = vec![2];
        s.extend(&self.hidden);
        s.push(self.n_classes);
        s
    }
}

/// Data, shards and initial model shared by both arms for one seed.
#[derive(Debug, Clone)]
pub struct Workload {
    pub nodes: Vec<(NodeId, NodeRole)>,
    pub shards: BTreeMap<NodeId, Dataset>,
    pub test: Dataset,
    pub initial: ModelParams,
}

pub fn build_workload(cfg: &ExperimentConfig) -> Result<Workload, SimError> {
    cfg.validate()?;
    let seed = |label: &str| derive_seed(cfg.master_seed, &[label.as_bytes()]);
    let train =
        partition::make_synthetic(cfg.n_classes, cfg.per_class, cfg.spread, seed("train-data"))?;
    let test = partition::make_synthetic(
        cfg.n_classes,
        cfg.test_per_class,
        cfg.spread,
        seed("test-data"),
    )?;
    let spec = PartitionSpec {
        scheme: cfg.scheme,
        n_nodes: cfg.n_nodes,
        seed: seed("partition"),
    };
    let parts = partition::split(&train, &spec)?;
    let poison_seed = seed("poison");
    let mut nodes = Vec::new();
    let mut shards = BTreeMap::new();
    for (i, (id, part)) in cfg.node_ids().into_iter().zip(parts).enumerate() {
        let role = cfg.role_of(i);
        let shard = if role.is_malicious() {
            partition::poison(&part, poison_seed)
        } else {
            part
        };
        nodes.push((id.clone(), role));
        shards.insert(id, shard);
    }
    let initial = init_model(&cfg.shapes(), seed("init"))?;
    Ok(Workload {
        nodes,
        shards,
        test,
        initial,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub bytes: ChannelBytes,
    pub cumulative: ChannelBytes,
    /// Teachers picked by each trusted node, in ring order. Empty for FedAvg.
    pub teachers: Vec<usize>,
    pub poisoned_teacher_selected: bool,
}

pub const CSV_HEADER: &str = "round,accuracy,bytes_direct,bytes_store,bytes_ledger,cum_direct,cum_store,cum_ledger,teachers,poisoned_teacher_selected";

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        let teachers: Vec<String> = self.teachers.iter().map(|t| t.to_string()).collect();
        format!(
            "{},{:.6},{},{},{},{},{},{},{},{}",
            self.round,
            self.accuracy,
            self.bytes.direct,
            self.bytes.store,
            self.bytes.ledger,
            self.cumulative.direct,
            self.cumulative.store,
            self.cumulative.ledger,
            teachers.join(";"),
            self.poisoned_teacher_selected
        )
    }
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    /// Row 0 is the initial model; row `t` follows round `t`.
    pub metrics: Vec<RoundMetrics>,
    pub events: Vec<TransferEvent>,
    /// SHA-256 of the serialized global model after each round, row 0 initial.
    pub trajectory: Vec<[u8; 32]>,
    pub final_model: ModelParams,
}

impl ExperimentOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.accuracy)
    }

    pub fn csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let last = self.metrics.last().expect("row 0 always present");
        let poisoned_rounds = self
            .metrics
            .iter()
            .filter(|m| m.poisoned_teacher_selected)
            .count();
        let mut s = String::new();
        let _ = writeln!(s, "arm={}", c.arm.as_str());
        let _ = writeln!(s, "transport={}", c.transport.as_str());
        let _ = writeln!(s, "seed={}", c.master_seed);
        let _ = writeln!(
            s,
            "nodes={} trusted={} malicious={}",
            c.n_nodes, c.n_trusted, c.n_malicious
        );
        let _ = writeln!(s, "rounds={}", c.rounds);
        let _ = writeln!(s, "initial_accuracy={:.6}", self.metrics[0].accuracy);
        let _ = writeln!(s, "final_accuracy={:.6}", last.accuracy);
        let _ = writeln!(s, "bytes_direct={}", last.cumulative.direct);
        let _ = writeln!(s, "bytes_store={}", last.cumulative.store);
        let _ = writeln!(s, "bytes_ledger={}", last.cumulative.ledger);
        let _ = writeln!(s, "poisoned_teacher_rounds={poisoned_rounds}");
        s
    }
}

fn digest(m: &ModelParams) -> [u8; 32] {
    Sha256::digest(m.to_bytes()).into()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, SimError> {
    let w = build_workload(cfg)?;
    run_on_workload(cfg, w)
}

/// Runs `cfg.arm` on a prepared workload.
pub fn run_on_workload(cfg: &ExperimentConfig, w: Workload) -> Result<ExperimentOutcome, SimError> {
    let engine_cfg = EngineConfig {
        train: cfg.train.clone(),
        distill: cfg.distill.clone(),
        master_seed: cfg.master_seed,
        task_id: format!("task-{}", cfg.master_seed),
    };
    let mut metrics = vec![RoundMetrics {
        round: 0,
        accuracy: evaluate(&w.initial, &w.test)?,
        bytes: ChannelBytes::default(),
        cumulative: ChannelBytes::default(),
        teachers: Vec::new(),
        poisoned_teacher_selected: false,
    }];
    let mut trajectory = vec![digest(&w.initial)];
    let mut cumulative = ChannelBytes::default();
    let mut push =
        |round: usize, model: &ModelParams, events: &[TransferEvent], teachers, poisoned| {
            let bytes = ChannelBytes::of(events.iter().filter(|e| e.round == round));
            cumulative.direct += bytes.direct;
            cumulative.store += bytes.store;
            cumulative.ledger += bytes.ledger;
            trajectory.push(digest(model));
            Ok::<_, SimError>(RoundMetrics {
                round,
                accuracy: evaluate(model, &w.test)?,
                bytes,
                cumulative,
                teachers,
                poisoned_teacher_selected: poisoned,
            })
        };

    let (events, final_model) = match cfg.arm {
        Arm::Rdfl => {
            let ring = build_ring(&w.nodes, cfg.vnodes).map_err(EngineError::from)?;
            let malicious: Vec<NodeId> = w
                .nodes
                .iter()
                .filter(|(_, r)| r.is_malicious())
                .map(|(id, _)| id.clone())
                .collect();
            let mut engine = Engine::new(
                ring,
                w.shards.clone(),
                w.initial.clone(),
                engine_cfg,
                cfg.transport,
            )?;
            for round in 1..=cfg.rounds {
                engine.run_round()?;
                let choices: Vec<_> = engine
                    .state
                    .teacher_log
                    .iter()
                    .filter(|c| c.round == round)
                    .collect();
                let teachers = choices.iter().map(|c| c.selected.len()).collect();
                let poisoned = choices
                    .iter()
                    .flat_map(|c| &c.selected)
                    .any(|s| malicious.contains(&s.origin));
                let row = push(
                    round,
                    engine.global_model(),
                    &engine.state.events,
                    teachers,
                    poisoned,
                )?;
                metrics.push(row);
            }
            let gm = engine.global_model().clone();
            (std::mem::take(&mut engine.state.events), gm)
        }
        Arm::FedAvg => {
            let ids = w.nodes.iter().map(|(id, _)| id.clone()).collect();
            let mut base =
                FedAvgBaseline::new(ids, w.shards.clone(), w.initial.clone(), engine_cfg)?;
            for round in 1..=cfg.rounds {
                base.run_round()?;
                let row = push(round, base.global_model(), &base.events, Vec::new(), false)?;
                metrics.push(row);
            }
            let gm = base.global_model().clone();
            (std::mem::take(&mut base.events), gm)
        }
    };
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        metrics,
        events,
        trajectory,
        final_model,
    })
}

/// Writes `metrics.csv`, `events.log` and `summary.txt` into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), outcome.csv())?;
    std::fs::write(
        dir.join("events.log"),
        crate::rdfl::format_event_log(&outcome.events),
    )?;
    std::fs::write(dir.join("summary.txt"), outcome.summary())
}

/// Side-by-side byte accounting of a direct run and a content-addressed run.
#[derive(Debug, Clone, PartialEq)]
pub struct CommReport {
    pub rounds: usize,
    pub direct_per_round: Vec<ChannelBytes>,
    pub cas_per_round: Vec<ChannelBytes>,
    pub direct_cumulative: Vec<ChannelBytes>,
    pub cas_cumulative: Vec<ChannelBytes>,
    /// Model serialization size, the tolerance for linear growth.
    pub model_bytes: usize,
}

impl CommReport {
    fn cum(v: &[ChannelBytes], round: usize) -> Option<ChannelBytes> {
        round.checked_sub(1).and_then(|i| v.get(i)).copied()
    }

    /// Conventional:content-addressed direct-channel ratio after `round`.
    pub fn ratio_at(&self, round: usize) -> Option<f64> {
        let d = Self::cum(&self.direct_cumulative, round)?;
        let c = Self::cum(&self.cas_cumulative, round)?;
        (c.direct > 0).then(|| d.direct as f64 / c.direct as f64)
    }

    pub fn direct_cumulative_at(&self, round: usize) -> Option<usize> {
        Self::cum(&self.direct_cumulative, round).map(|c| c.direct)
    }

    /// Direct-mode cumulative direct bytes after `big` equal `big/small`
    /// times the value after `small`, within one model serialization.
    pub fn direct_is_linear(&self, small: usize, big: usize) -> bool {
        match (
            self.direct_cumulative_at(small),
            self.direct_cumulative_at(big),
        ) {
            (Some(s), Some(b)) if small > 0 && big.is_multiple_of(small) => {
                let expect = s * (big / small);
                b.abs_diff(expect) <= self.model_bytes
            }
            _ => false,
        }
    }

    /// Content-addressed direct bytes are the same in every round after the first.
    pub fn cas_direct_constant_after_first(&self) -> bool {
        self.cas_per_round
            .get(1..)
            .is_some_and(|rest| rest.windows(2).all(|w| w[0].direct == w[1].direct))
    }
}

impl fmt::Display for CommReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "round,direct_direct,direct_cum,cas_direct,cas_store,cas_ledger,cas_direct_cum,ratio"
        )?;
        for r in 1..=self.rounds {
            let d = self.direct_per_round[r - 1];
            let c = self.cas_per_round[r - 1];
            writeln!(
                f,
                "{r},{},{},{},{},{},{},{:.3}",
                d.direct,
                self.direct_cumulative[r - 1].direct,
                c.direct,
                c.store,
                c.ledger,
                self.cas_cumulative[r - 1].direct,
                self.ratio_at(r).unwrap_or(f64::NAN)
            )?;
        }
        for r in [5, 10, 50] {
            if let Some(ratio) = self.ratio_at(r) {
                writeln!(f, "ratio@{r}={ratio:.3}")?;
            }
        }
        writeln!(
            f,
            "cas_direct_constant_after_round_1={}",
            self.cas_direct_constant_after_first()
        )
    }
}

fn per_round(events: &[TransferEvent], rounds: usize) -> (Vec<ChannelBytes>, Vec<ChannelBytes>) {
    let mut per = vec![ChannelBytes::default(); rounds];
    for e in events {
        if (1..=rounds).contains(&e.round) {
            per[e.round - 1].add(e);
        }
    }
    let mut cum = Vec::with_capacity(rounds);
    let mut acc = ChannelBytes::default();
    for p in &per {
        acc.direct += p.direct;
        acc.store += p.store;
        acc.ledger += p.ledger;
        cum.push(acc);
    }
    (per, cum)
}

/// Compares a direct-mode and a content-addressed run of the same experiment.
pub fn communication_report(
    direct: &ExperimentOutcome,
    cas: &ExperimentOutcome,
) -> Result<CommReport, SimError> {
    if direct.config.transport != TransportMode::Direct
        || cas.config.transport != TransportMode::ContentAddressed
    {
        return Err(SimError::MismatchedRuns(
            "expected one direct and one cas run".into(),
        ));
    }
    if direct.trajectory != cas.trajectory {
        return Err(SimError::MismatchedRuns(
            "global model trajectories differ".into(),
        ));
    }
    let rounds = direct.config.rounds;
    let (direct_per_round, direct_cumulative) = per_round(&direct.events, rounds);
    let (cas_per_round, cas_cumulative) = per_round(&cas.events, rounds);
    Ok(CommReport {
        rounds,
        direct_per_round,
        cas_per_round,
        direct_cumulative,
        cas_cumulative,
        model_bytes: direct.final_model.encoded_len(),
    })
}
