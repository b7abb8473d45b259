use std::collections::BTreeMap;

use crate::hashring::NodeId;
use crate::tinynn::{average_params, train_local, Dataset, ModelParams};

use super::events::{Phase, TransferEvent, TransferKind};
use super::{stream_seed, EngineConfig, EngineError};

/// Endpoint name for the averaging step in the baseline's event log.
pub const AGGREGATOR: &str = "aggregator";

/// Plain FedAvg over all nodes: local training everywhere, then an
/// unweighted mean with no trust distinction and no distillation.
///
/// Traffic is logged as a direct upload and download per node.
pub struct FedAvgBaseline {
    nodes: Vec<NodeId>,
    shards: BTreeMap<NodeId, Dataset>,
    cfg: EngineConfig,
    global: ModelParams,
    round: usize,
    pub events: Vec<TransferEvent>,
}

impl FedAvgBaseline {
    /// `nodes` fixes the summation order of the mean.
    pub fn new(
        nodes: Vec<NodeId>,
        shards: BTreeMap<NodeId, Dataset>,
        initial: ModelParams,
        cfg: EngineConfig,
    ) -> Result<Self, EngineError> {
        cfg.train.validate()?;
        if let Some(missing) = nodes.iter().find(|n| !shards.contains_key(*n)) {
            return Err(EngineError::MissingShard(missing.clone()));
        }
        if nodes.is_empty() {
            return Err(EngineError::Nn(crate::tinynn::NnError::EmptyList));
        }
        Ok(Self {
            nodes,
            shards,
            cfg,
            global: initial,
            round: 0,
            events: Vec::new(),
        })
    }

    pub fn global_model(&self) -> &ModelParams {
        &self.global
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn run_round(&mut self) -> Result<(), EngineError> {
        self.round += 1;
        let mut locals = Vec::with_capacity(self.nodes.len());
        for id in &self.nodes {
            let cfg = self.cfg.train.with_seed(stream_seed(
                self.cfg.master_seed,
                "train",
                self.round,
                id,
            ));
            let m = train_local(&self.global, &self.shards[id], &cfg)?;
            self.events.push(TransferEvent {
                round: self.round,
                phase: Phase::Baseline,
                from: id.to_string(),
                to: AGGREGATOR.into(),
                kind: TransferKind::Model,
                bytes: m.encoded_len(),
            });
            locals.push(m);
        }
        self.global = average_params(&locals.iter().collect::<Vec<_>>())?;
        for id in &self.nodes {
            self.events.push(TransferEvent {
                round: self.round,
                phase: Phase::Baseline,
                from: AGGREGATOR.into(),
                to: id.to_string(),
                kind: TransferKind::Global,
                bytes: self.global.encoded_len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::make_synthetic;
    use crate::tinynn::init_model;

    #[test]
    fn single_node_matches_local_training() {
        let id = NodeId::new("solo");
        let data = make_synthetic(3, 20, 0.5, 1).unwrap();
        let init = init_model(&[2, 5, 3], 2).unwrap();
        let cfg = EngineConfig::default();
        let mut b = FedAvgBaseline::new(
            vec![id.clone()],
            [(id.clone(), data.clone())].into(),
            init.clone(),
            cfg.clone(),
        )
        .unwrap();
        b.run_round().unwrap();
        let direct = train_local(
            &init,
            &data,
            &cfg.train.with_seed(stream_seed(0, "train", 1, &id)),
        )
        .unwrap();
        assert_eq!(b.global_model(), &direct);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let ids: Vec<NodeId> = (0..3).map(|i| NodeId::new(format!("n{i}"))).collect();
            let shards = ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), make_synthetic(3, 10, 0.5, i as u64).unwrap()))
                .collect();
            let mut b = FedAvgBaseline::new(
                ids,
                shards,
                init_model(&[2, 5, 3], 2).unwrap(),
                EngineConfig::default(),
            )
            .unwrap();
            for _ in 0..3 {
                b.run_round().unwrap();
            }
            b.global_model().clone()
        };
        assert_eq!(run(), run());
    }
}
