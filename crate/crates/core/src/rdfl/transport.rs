//! Model delivery, either as raw bytes or through store + ledger + sealed hash.

use crate::castore::Store;
use crate::hashring::NodeId;
use crate::ledger::{Ledger, Tx, TxKind};
use crate::sealed::{KeyRegistry, Suite};
use crate::tinynn::ModelParams;

use super::events::{Phase, TransferEvent, TransferKind};
use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    /// Conventional decentralized FL: models travel node to node.
    Direct,
    /// Models go into the content store once; only sealed hashes travel.
    ContentAddressed,
}

impl TransportMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportMode::Direct => "direct",
            TransportMode::ContentAddressed => "cas",
        }
    }
}

pub const STORE_ENDPOINT: &str = "store";
pub const LEDGER_ENDPOINT: &str = "ledger";

#[derive(Debug)]
pub struct CasStack {
    pub store: Store,
    pub ledger: Ledger,
    pub keys: KeyRegistry,
    pub task_id: String,
}

#[derive(Debug)]
pub enum Transport {
    Direct,
    ContentAddressed(Box<CasStack>),
}

/// What is being delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Local,
    Global,
}

impl Transport {
    pub fn new<'a>(
        mode: TransportMode,
        nodes: impl IntoIterator<Item = &'a NodeId>,
        task_id: &str,
        seed: u64,
        suite: Suite,
    ) -> Result<Self, EngineError> {
        match mode {
            TransportMode::Direct => Ok(Transport::Direct),
            TransportMode::ContentAddressed => {
                let mut ledger = Ledger::new();
                ledger.register_task(task_id, "rdfl")?;
                let mut keys = KeyRegistry::new(seed, suite);
                for n in nodes {
                    keys.register(n)?;
                }
                Ok(Transport::ContentAddressed(Box::new(CasStack {
                    store: Store::new(),
                    ledger,
                    keys,
                    task_id: task_id.to_owned(),
                })))
            }
        }
    }

    pub fn mode(&self) -> TransportMode {
        match self {
            Transport::Direct => TransportMode::Direct,
            Transport::ContentAddressed(_) => TransportMode::ContentAddressed,
        }
    }

    pub fn cas(&self) -> Option<&CasStack> {
        match self {
            Transport::ContentAddressed(c) => Some(c),
            Transport::Direct => None,
        }
    }

    /// Moves `model` from `from` to `to`, logging every byte, and returns the
    /// copy the receiver ends up with.
    #[allow(clippy::too_many_arguments)]
    pub fn deliver(
        &mut self,
        log: &mut Vec<TransferEvent>,
        round: usize,
        phase: Phase,
        from: &NodeId,
        to: &NodeId,
        model: &ModelParams,
        payload: Payload,
    ) -> Result<ModelParams, EngineError> {
        let mut emit = |from: &str, to: &str, kind: TransferKind, bytes: usize| {
            log.push(TransferEvent {
                round,
                phase,
                from: from.to_owned(),
                to: to.to_owned(),
                kind,
                bytes,
            })
        };
        match self {
            Transport::Direct => {
                let kind = match payload {
                    Payload::Local => TransferKind::Model,
                    Payload::Global => TransferKind::Global,
                };
                emit(from.as_str(), to.as_str(), kind, model.encoded_len());
                Ok(model.clone())
            }
            Transport::ContentAddressed(cas) => {
                let hs = cas.keys.establish(from, to, round)?;
                if let Some(wire) = &hs.transported {
                    emit(
                        to.as_str(),
                        from.as_str(),
                        TransferKind::Handshake,
                        wire.len(),
                    );
                }
                let receipt = cas.store.put_counted(&model.to_bytes())?;
                emit(
                    from.as_str(),
                    STORE_ENDPOINT,
                    TransferKind::Put,
                    receipt.stored_bytes,
                );

                let sealed = cas.keys.seal(&hs.session, &receipt.hash);
                let tx = Tx {
                    sender: from.clone(),
                    task_id: cas.task_id.clone(),
                    round: round as u64,
                    payload: sealed.clone(),
                    kind: match payload {
                        Payload::Local => TxKind::ModelPublish,
                        Payload::Global => TxKind::GlobalPublish,
                    },
                };
                let tx_len = tx.encoded_len();
                cas.ledger.submit_tx(tx)?;
                emit(from.as_str(), LEDGER_ENDPOINT, TransferKind::Tx, tx_len);
                emit(from.as_str(), to.as_str(), TransferKind::Hash, sealed.len());

                // Receiver side.
                let hash = cas.keys.open(&hs.session, &sealed)?;
                let bytes = cas.store.get(&hash)?;
                emit(
                    STORE_ENDPOINT,
                    to.as_str(),
                    TransferKind::Fetch,
                    bytes.len(),
                );
                Ok(ModelParams::from_bytes(bytes)?)
            }
        }
    }
}
