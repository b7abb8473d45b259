//! Consistent-hashing ring of data nodes.
//!
//! Every real node sits at `fnv1a64(id) mod 2^32`. Trusted nodes also get
//! `vnodes_per_trusted` virtual positions hashed from `"{id}#v{i}"`. Untrusted
//! nodes route clockwise to the first trusted entry (real or virtual) and
//! virtual hits resolve to their owner.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

/// Default number of virtual positions per trusted node.
pub const DEFAULT_VNODES: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit over the UTF-8 bytes, truncated to the low 32 bits.
pub fn ring_hash(key: &str) -> RingPosition {
    let mut h = FNV_OFFSET;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    RingPosition(h as u32)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RingError {
    #[error("ring needs at least one trusted node")]
    NoTrustedNode,
    #[error("duplicate node id {0:?}")]
    DuplicateId(String),
    #[error("empty node id")]
    EmptyId,
    #[error("position {pos} claimed by both {first:?} and {second:?}")]
    PositionCollision {
        pos: u32,
        first: String,
        second: String,
    },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {0:?} is not trusted")]
    NotTrusted(String),
    #[error("malformed ring dump at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trust {
    Trusted,
    Untrusted,
}

/// Trust role plus the experiment-only malicious flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRole {
    trust: Trust,
    malicious: bool,
}

impl NodeRole {
    pub const TRUSTED: NodeRole = NodeRole {
        trust: Trust::Trusted,
        malicious: false,
    };
    pub const UNTRUSTED: NodeRole = NodeRole {
        trust: Trust::Untrusted,
        malicious: false,
    };
    pub const MALICIOUS: NodeRole = NodeRole {
        trust: Trust::Untrusted,
        malicious: true,
    };

    pub fn trust(&self) -> Trust {
        self.trust
    }

    pub fn is_trusted(&self) -> bool {
        self.trust == Trust::Trusted
    }

    pub fn is_malicious(&self) -> bool {
        self.malicious
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RingPosition(pub u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingEntry {
    pub pos: RingPosition,
    /// Entry name: the node id for real entries, `"{owner}#v{i}"` for virtuals.
    pub id: NodeId,
    pub is_virtual: bool,
    pub owner: NodeId,
}

/// Immutable ring; mutation means rebuilding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ring {
    entries: Vec<RingEntry>,
    roles: BTreeMap<NodeId, NodeRole>,
    /// Index into `entries` of each real node.
    real_index: HashMap<NodeId, usize>,
    vnodes_per_trusted: usize,
}

/// Builds the ring with hashed positions for every node.
pub fn build_ring(
    nodes: &[(NodeId, NodeRole)],
    vnodes_per_trusted: usize,
) -> Result<Ring, RingError> {
    Ring::build(nodes, vnodes_per_trusted, &HashMap::new())
}

impl Ring {
    /// Like [`build_ring`], but real nodes listed in `injected` are placed at
    /// the given position instead of their hash. Virtual positions are always
    /// hashed.
    pub fn build(
        nodes: &[(NodeId, NodeRole)],
        vnodes_per_trusted: usize,
        injected: &HashMap<NodeId, u32>,
    ) -> Result<Ring, RingError> {
        let mut roles = BTreeMap::new();
        for (id, role) in nodes {
            if id.as_str().is_empty() {
                return Err(RingError::EmptyId);
            }
            let role = if role.is_trusted() {
                NodeRole::TRUSTED
            } else {
                *role
            };
            if roles.insert(id.clone(), role).is_some() {
                return Err(RingError::DuplicateId(id.to_string()));
            }
        }
        if !roles.values().any(NodeRole::is_trusted) {
            return Err(RingError::NoTrustedNode);
        }

        let mut entries = Vec::with_capacity(nodes.len() * (1 + vnodes_per_trusted));
        for (id, role) in nodes {
            let pos = injected
                .get(id)
                .map(|p| RingPosition(*p))
                .unwrap_or_else(|| ring_hash(id.as_str()));
            entries.push(RingEntry {
                pos,
                id: id.clone(),
                is_virtual: false,
                owner: id.clone(),
            });
            if role.is_trusted() {
                for i in 0..vnodes_per_trusted {
                    let name = format!("{id}#v{i}");
                    entries.push(RingEntry {
                        pos: ring_hash(&name),
                        id: NodeId(name),
                        is_virtual: true,
                        owner: id.clone(),
                    });
                }
            }
        }
        Self::from_entries(entries, roles, vnodes_per_trusted)
    }

    fn from_entries(
        mut entries: Vec<RingEntry>,
        roles: BTreeMap<NodeId, NodeRole>,
        vnodes_per_trusted: usize,
    ) -> Result<Ring, RingError> {
        entries.sort_by(|a, b| a.pos.cmp(&b.pos).then_with(|| a.id.cmp(&b.id)));
        for pair in entries.windows(2) {
            if pair[0].pos == pair[1].pos {
                return Err(RingError::PositionCollision {
                    pos: pair[0].pos.0,
                    first: pair[0].id.to_string(),
                    second: pair[1].id.to_string(),
                });
            }
        }
        let real_index = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_virtual)
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        Ok(Ring {
            entries,
            roles,
            real_index,
            vnodes_per_trusted,
        })
    }

    pub fn entries(&self) -> &[RingEntry] {
        &self.entries
    }

    pub fn vnodes_per_trusted(&self) -> usize {
        self.vnodes_per_trusted
    }

    pub fn role(&self, id: &NodeId) -> Option<NodeRole> {
        self.roles.get(id).copied()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.roles.contains_key(id)
    }

    pub fn position(&self, id: &NodeId) -> Option<RingPosition> {
        self.real_index.get(id).map(|&i| self.entries[i].pos)
    }

    pub fn node_count(&self) -> usize {
        self.roles.len()
    }

    /// Real members in clockwise order starting from the smallest position.
    pub fn members(&self) -> impl Iterator<Item = &NodeId> {
        self.entries.iter().filter(|e| !e.is_virtual).map(|e| &e.id)
    }

    /// Trusted real members in clockwise order.
    pub fn trusted(&self) -> Vec<NodeId> {
        self.members()
            .filter(|id| self.roles[*id].is_trusted())
            .cloned()
            .collect()
    }

    pub fn untrusted(&self) -> Vec<NodeId> {
        self.members()
            .filter(|id| !self.roles[*id].is_trusted())
            .cloned()
            .collect()
    }

    fn index_of(&self, id: &NodeId) -> Result<usize, RingError> {
        self.real_index
            .get(id)
            .copied()
            .ok_or_else(|| RingError::UnknownNode(id.to_string()))
    }

    fn is_trusted_entry(&self, e: &RingEntry) -> bool {
        self.roles[&e.owner].is_trusted()
    }

    /// Walks clockwise from `start` (exclusive), wrapping, and returns the first
    /// entry satisfying `pred`. Visits `start` itself last.
    fn scan_clockwise(
        &self,
        start: usize,
        pred: impl Fn(&RingEntry) -> bool,
    ) -> Option<&RingEntry> {
        let n = self.entries.len();
        (1..=n)
            .map(|k| &self.entries[(start + k) % n])
            .find(|e| pred(e))
    }

    /// Owner of the first trusted entry strictly clockwise of `from`.
    pub fn route_to_trusted(&self, from: &NodeId) -> Result<NodeId, RingError> {
        let start = self.index_of(from)?;
        let hit = self
            .scan_clockwise(start, |e| self.is_trusted_entry(e))
            .expect("ring always holds a trusted entry");
        Ok(hit.owner.clone())
    }

    /// Next trusted real node clockwise; ignores virtual entries.
    pub fn next_trusted(&self, from: &NodeId) -> Result<NodeId, RingError> {
        let start = self.index_of(from)?;
        if !self.roles[from].is_trusted() {
            return Err(RingError::NotTrusted(from.to_string()));
        }
        let hit = self
            .scan_clockwise(start, |e| !e.is_virtual && self.is_trusted_entry(e))
            .expect("from itself is a trusted real entry");
        Ok(hit.id.clone())
    }

    /// Counterclockwise neighbour among real entries.
    pub fn prev_member(&self, from: &NodeId) -> Result<NodeId, RingError> {
        let start = self.index_of(from)?;
        let n = self.entries.len();
        let hit = (1..=n)
            .map(|k| &self.entries[(start + n - k) % n])
            .find(|e| !e.is_virtual)
            .expect("from itself is a real entry");
        Ok(hit.id.clone())
    }

    /// Clockwise neighbour among real entries.
    pub fn next_member(&self, from: &NodeId) -> Result<NodeId, RingError> {
        let start = self.index_of(from)?;
        let hit = self
            .scan_clockwise(start, |e| !e.is_virtual)
            .expect("from itself is a real entry");
        Ok(hit.id.clone())
    }

    /// Line-oriented dump: `pos\tid\treal|virtual\towner\ttrusted|untrusted`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let role = self.roles[&e.owner];
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.pos.0,
                e.id,
                if e.is_virtual { "virtual" } else { "real" },
                e.owner,
                if role.is_trusted() {
                    "trusted"
                } else {
                    "untrusted"
                },
            ));
        }
        out
    }

    /// Parses [`Ring::dump`] output. The malicious flag is not part of the
    /// format, so every untrusted node loads as honest.
    pub fn load(text: &str) -> Result<Ring, RingError> {
        let bad = |line: usize, reason: &str| RingError::Parse {
            line,
            reason: reason.to_owned(),
        };
        let mut entries = Vec::new();
        let mut roles: BTreeMap<NodeId, NodeRole> = BTreeMap::new();
        let mut virtual_counts: BTreeMap<NodeId, usize> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(lineno, "expected 5 tab-separated columns"));
            }
            let pos: u32 = cols[0].parse().map_err(|_| bad(lineno, "bad position"))?;
            let is_virtual = match cols[2] {
                "real" => false,
                "virtual" => true,
                _ => return Err(bad(lineno, "expected real|virtual")),
            };
            let role = match cols[4] {
                "trusted" => NodeRole::TRUSTED,
                "untrusted" => NodeRole::UNTRUSTED,
                _ => return Err(bad(lineno, "expected trusted|untrusted")),
            };
            let owner = NodeId::new(cols[3]);
            if is_virtual {
                if !role.is_trusted() {
                    return Err(bad(lineno, "virtual entry owned by untrusted node"));
                }
                *virtual_counts.entry(owner.clone()).or_default() += 1;
            } else {
                if cols[1] != cols[3] {
                    return Err(bad(lineno, "real entry must own itself"));
                }
                if roles.insert(owner.clone(), role).is_some() {
                    return Err(RingError::DuplicateId(owner.to_string()));
                }
            }
            entries.push(RingEntry {
                pos: RingPosition(pos),
                id: NodeId::new(cols[1]),
                is_virtual,
                owner,
            });
        }
        for owner in virtual_counts.keys() {
            match roles.get(owner) {
                Some(r) if r.is_trusted() => {}
                _ => {
                    return Err(RingError::Parse {
                        line: 0,
                        reason: format!("virtual owner {owner} has no trusted real entry"),
                    })
                }
            }
        }
        let trusted: Vec<&NodeId> = roles
            .iter()
            .filter(|(_, r)| r.is_trusted())
            .map(|(id, _)| id)
            .collect();
        if trusted.is_empty() {
            return Err(RingError::NoTrustedNode);
        }
        let vnodes = virtual_counts.get(trusted[0]).copied().unwrap_or(0);
        if trusted
            .iter()
            .any(|id| virtual_counts.get(*id).copied().unwrap_or(0) != vnodes)
        {
            return Err(RingError::Parse {
                line: 0,
                reason: "trusted nodes carry unequal virtual counts".into(),
            });
        }
        Self::from_entries(entries, roles, vnodes)
    }
}
