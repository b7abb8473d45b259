//! Hash-chained append-only ledger.
//!
//! Each submission becomes its own block. A block digest is SHA-256 over
//! `index (u64 LE) | prev_digest (32) | tx count (u32 LE) | canonical txs`,
//! where a canonical tx is
//! `len|sender | len|task_id | round (u64 LE) | len|payload | kind (u8)`
//! with `len` a u32 LE byte count. Task registration plays the controller
//! contract; the per-task index plays the storage contract.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::castore::ContentHash;
use crate::hashring::NodeId;
use crate::sealed;

pub const DIGEST_LEN: usize = 32;
pub type BlockDigest = [u8; DIGEST_LEN];

/// Sender recorded on task-control transactions.
pub const CONTROLLER: &str = "controller";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("task {0:?} is already registered")]
    DuplicateTask(String),
    #[error("task {0:?} is not registered")]
    UnknownTask(String),
    #[error("malformed transaction: {0}")]
    MalformedTx(String),
    #[error("chain fails verification at block {0}")]
    ChainCorrupted(usize),
    #[error("cannot parse chain export line {line}: {reason}")]
    Import { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxKind {
    ModelPublish,
    GlobalPublish,
    TaskControl,
}

impl TxKind {
    fn code(self) -> u8 {
        match self {
            TxKind::ModelPublish => 0,
            TxKind::GlobalPublish => 1,
            TxKind::TaskControl => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TxKind::ModelPublish),
            1 => Some(TxKind::GlobalPublish),
            2 => Some(TxKind::TaskControl),
            _ => None,
        }
    }

    pub fn is_publish(self) -> bool {
        self != TxKind::TaskControl
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tx {
    pub sender: NodeId,
    pub task_id: String,
    pub round: u64,
    pub payload: Vec<u8>,
    pub kind: TxKind,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Some(head)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn chunk(&mut self) -> Option<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

impl Tx {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.payload.len());
        self.write_canonical(&mut out);
        out
    }

    fn write_canonical(&self, out: &mut Vec<u8>) {
        put_bytes(out, self.sender.as_str().as_bytes());
        put_bytes(out, self.task_id.as_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        put_bytes(out, &self.payload);
        out.push(self.kind.code());
    }

    fn read_canonical(r: &mut Reader<'_>) -> Option<Tx> {
        let sender = String::from_utf8(r.chunk()?.to_vec()).ok()?;
        let task_id = String::from_utf8(r.chunk()?.to_vec()).ok()?;
        let round = r.u64()?;
        let payload = r.chunk()?.to_vec();
        let kind = TxKind::from_code(r.take(1)?[0])?;
        Some(Tx {
            sender: NodeId::new(sender),
            task_id,
            round,
            payload,
            kind,
        })
    }

    /// Serialized size; this is what the ledger channel is charged.
    pub fn encoded_len(&self) -> usize {
        4 + self.sender.as_str().len() + 4 + self.task_id.len() + 8 + 4 + self.payload.len() + 1
    }

    fn check(&self) -> Result<(), LedgerError> {
        if self.sender.as_str().is_empty() {
            return Err(LedgerError::MalformedTx("empty sender".into()));
        }
        if self.kind.is_publish() {
            if self.payload.is_empty() {
                return Err(LedgerError::MalformedTx("empty publish payload".into()));
            }
            if !sealed::is_sealed(&self.payload) || ContentHash::parse_bytes(&self.payload).is_ok()
            {
                return Err(LedgerError::MalformedTx(
                    "publish payload is not sealed".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev_digest: BlockDigest,
    pub txs: Vec<Tx>,
    pub digest: BlockDigest,
}

impl Block {
    fn seal(index: u64, prev_digest: BlockDigest, txs: Vec<Tx>) -> Block {
        let digest = block_digest(index, &prev_digest, &txs);
        Block {
            index,
            prev_digest,
            txs,
            digest,
        }
    }

    pub fn recompute_digest(&self) -> BlockDigest {
        block_digest(self.index, &self.prev_digest, &self.txs)
    }

    fn tx_bytes(&self) -> Vec<u8> {
        let mut out = (self.txs.len() as u32).to_le_bytes().to_vec();
        for tx in &self.txs {
            tx.write_canonical(&mut out);
        }
        out
    }
}

pub fn block_digest(index: u64, prev: &BlockDigest, txs: &[Tx]) -> BlockDigest {
    let mut h = Sha256::new();
    h.update(index.to_le_bytes());
    h.update(prev);
    h.update((txs.len() as u32).to_le_bytes());
    let mut buf = Vec::new();
    for tx in txs {
        buf.clear();
        tx.write_canonical(&mut buf);
        h.update(&buf);
    }
    h.finalize().into()
}

/// Result of [`Ledger::verify_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Ok,
    /// First block whose digest, index, or back-link does not check out.
    BadBlock(usize),
}

/// Filter for [`Ledger::trace`]; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceFilter {
    pub sender: Option<NodeId>,
    pub round: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub sender: NodeId,
    pub round: u64,
    pub block_index: usize,
    pub kind: TxKind,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    chain: Vec<Block>,
    tasks: BTreeMap<String, String>,
    /// task id -> (block index, tx position) in submission order.
    task_index: BTreeMap<String, Vec<(usize, usize)>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.chain
    }

    pub fn len(&self) -> usize {
        self.chain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chain.is_empty()
    }

    pub fn task_metadata(&self, task_id: &str) -> Option<&str> {
        self.tasks.get(task_id).map(String::as_str)
    }

    fn append(&mut self, tx: Tx) -> Result<usize, LedgerError> {
        let prev = match self.chain.last() {
            Some(tip) => {
                if tip.recompute_digest() != tip.digest {
                    return Err(LedgerError::ChainCorrupted(self.chain.len() - 1));
                }
                tip.digest
            }
            None => [0; DIGEST_LEN],
        };
        let index = self.chain.len();
        self.task_index
            .entry(tx.task_id.clone())
            .or_default()
            .push((index, 0));
        self.chain.push(Block::seal(index as u64, prev, vec![tx]));
        Ok(index)
    }

    /// Registers a task via a task-control transaction; returns its block.
    pub fn register_task(&mut self, task_id: &str, metadata: &str) -> Result<usize, LedgerError> {
        if self.tasks.contains_key(task_id) {
            return Err(LedgerError::DuplicateTask(task_id.to_owned()));
        }
        let tx = Tx {
            sender: NodeId::new(CONTROLLER),
            task_id: task_id.to_owned(),
            round: 0,
            payload: metadata.as_bytes().to_vec(),
            kind: TxKind::TaskControl,
        };
        tx.check()?;
        let index = self.append(tx)?;
        self.tasks.insert(task_id.to_owned(), metadata.to_owned());
        Ok(index)
    }

    /// Verifies and appends a publish transaction in its own block.
    pub fn submit_tx(&mut self, tx: Tx) -> Result<usize, LedgerError> {
        if !self.tasks.contains_key(&tx.task_id) {
            return Err(LedgerError::UnknownTask(tx.task_id));
        }
        if tx.kind == TxKind::TaskControl {
            return Err(LedgerError::MalformedTx(
                "task control goes through register_task".into(),
            ));
        }
        tx.check()?;
        self.append(tx)
    }

    pub fn verify_chain(&self) -> ChainStatus {
        let mut prev = [0u8; DIGEST_LEN];
        for (i, block) in self.chain.iter().enumerate() {
            if block.index != i as u64
                || block.prev_digest != prev
                || block.recompute_digest() != block.digest
            {
                return ChainStatus::BadBlock(i);
            }
            prev = block.digest;
        }
        ChainStatus::Ok
    }

    /// Transactions of `task_id` in chain order matching `filter`.
    pub fn trace(
        &self,
        task_id: &str,
        filter: &TraceFilter,
    ) -> Result<Vec<TraceEntry>, LedgerError> {
        if !self.tasks.contains_key(task_id) {
            return Err(LedgerError::UnknownTask(task_id.to_owned()));
        }
        let slots = self
            .task_index
            .get(task_id)
            .map(Vec::as_slice)
            .unwrap_or_default();
        Ok(slots
            .iter()
            .filter_map(|&(b, t)| {
                let tx = &self.chain[b].txs[t];
                let wanted = tx.kind.is_publish()
                    && filter.sender.as_ref().is_none_or(|s| *s == tx.sender)
                    && filter.round.is_none_or(|r| r == tx.round);
                wanted.then(|| TraceEntry {
                    sender: tx.sender.clone(),
                    round: tx.round,
                    block_index: b,
                    kind: tx.kind,
                    payload: tx.payload.clone(),
                })
            })
            .collect())
    }

    /// One line per block: `index\tprev_hex\tdigest_hex\ttxs_hex`, where
    /// `txs_hex` is the tx count (u32 LE) followed by canonical txs.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for b in &self.chain {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                b.index,
                hex::encode(b.prev_digest),
                hex::encode(b.digest),
                hex::encode(b.tx_bytes())
            ));
        }
        out
    }

    /// Rebuilds a ledger from [`Ledger::export`] output without re-verifying;
    /// call [`Ledger::verify_chain`] on the result.
    pub fn import(text: &str) -> Result<Ledger, LedgerError> {
        let mut ledger = Ledger::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |reason: &str| LedgerError::Import {
                line: i + 1,
                reason: reason.to_owned(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let index: u64 = cols[0].parse().map_err(|_| bad("index"))?;
            let digest32 = |s: &str| -> Result<BlockDigest, LedgerError> {
                hex::decode(s)
                    .ok()
                    .and_then(|v| v.try_into().ok())
                    .ok_or_else(|| bad("digest"))
            };
            let prev_digest = digest32(cols[1])?;
            let digest = digest32(cols[2])?;
            let raw = hex::decode(cols[3]).map_err(|_| bad("tx hex"))?;
            let mut r = Reader { bytes: &raw };
            let count = r.u32().ok_or_else(|| bad("tx count"))?;
            let mut txs = Vec::with_capacity(count as usize);
            for _ in 0..count {
                txs.push(Tx::read_canonical(&mut r).ok_or_else(|| bad("tx"))?);
            }
            if !r.bytes.is_empty() {
                return Err(bad("trailing bytes"));
            }
            let pos = ledger.chain.len();
            for (t, tx) in txs.iter().enumerate() {
                ledger
                    .task_index
                    .entry(tx.task_id.clone())
                    .or_default()
                    .push((pos, t));
                if tx.kind == TxKind::TaskControl {
                    ledger.tasks.insert(
                        tx.task_id.clone(),
                        String::from_utf8_lossy(&tx.payload).into_owned(),
                    );
                }
            }
            ledger.chain.push(Block {
                index,
                prev_digest,
                txs,
                digest,
            });
        }
        Ok(ledger)
    }

    /// Test hook: mutate a committed block in place, bypassing every check.
    #[doc(hidden)]
    pub fn tamper(&mut self, index: usize, f: impl FnOnce(&mut Block)) {
        f(&mut self.chain[index]);
    }

    /// Test hook: drop a block without touching its neighbours.
    #[doc(hidden)]
    pub fn remove_block(&mut self, index: usize) -> Block {
        self.chain.remove(index)
    }
}

impl fmt::Display for ChainStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainStatus::Ok => f.write_str("ok"),
            ChainStatus::BadBlock(i) => write!(f, "bad block {i}"),
        }
    }
}
