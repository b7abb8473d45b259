use std::fmt;

/// Protocol step a transfer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Forward,
    Sync,
    Resync,
    Broadcast,
    Baseline,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Sync => "sync",
            Phase::Resync => "resync",
            Phase::Broadcast => "broadcast",
            Phase::Baseline => "baseline",
        }
    }
}

/// What moved over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransferKind {
    /// Serialized local model, node to node.
    Model,
    /// Serialized global model, node to node.
    Global,
    /// Session key transport, receiver to sender.
    Handshake,
    /// Sealed content hash, node to node.
    Hash,
    /// Novel bytes written to the content store.
    Put,
    /// Bytes read back from the content store.
    Fetch,
    /// Serialized ledger transaction.
    Tx,
}

impl TransferKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferKind::Model => "model",
            TransferKind::Global => "global",
            TransferKind::Handshake => "handshake",
            TransferKind::Hash => "hash",
            TransferKind::Put => "put",
            TransferKind::Fetch => "fetch",
            TransferKind::Tx => "tx",
        }
    }

    pub fn channel(self) -> Channel {
        match self {
            TransferKind::Model
            | TransferKind::Global
            | TransferKind::Handshake
            | TransferKind::Hash => Channel::Direct,
            TransferKind::Put | TransferKind::Fetch => Channel::Store,
            TransferKind::Tx => Channel::Ledger,
        }
    }
}

/// Byte-accounting bucket. `Direct` is node-to-node traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Direct,
    Store,
    Ledger,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferEvent {
    pub round: usize,
    pub phase: Phase,
    pub from: String,
    pub to: String,
    pub kind: TransferKind,
    pub bytes: usize,
}

impl TransferEvent {
    pub fn channel(&self) -> Channel {
        self.kind.channel()
    }
}

impl fmt::Display for TransferEvent {
    /// `round,phase,from,to,kind,bytes`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.round,
            self.phase.as_str(),
            self.from,
            self.to,
            self.kind.as_str(),
            self.bytes
        )
    }
}

/// Newline-delimited export of an event log.
pub fn format_event_log(events: &[TransferEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

/// Per-channel byte sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelBytes {
    pub direct: usize,
    pub store: usize,
    pub ledger: usize,
}

impl ChannelBytes {
    pub fn add(&mut self, e: &TransferEvent) {
        match e.channel() {
            Channel::Direct => self.direct += e.bytes,
            Channel::Store => self.store += e.bytes,
            Channel::Ledger => self.ledger += e.bytes,
        }
    }

    pub fn total(&self) -> usize {
        self.direct + self.store + self.ledger
    }

    pub fn of<'a>(events: impl IntoIterator<Item = &'a TransferEvent>) -> Self {
        let mut acc = Self::default();
        for e in events {
            acc.add(e);
        }
        acc
    }
}
