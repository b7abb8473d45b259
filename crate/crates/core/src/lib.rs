//! Deterministic simulator for ring-topology decentralized federated
//! learning: consistent-hash ring, the three-phase round protocol (train and
//! forward, KL-gated distillation, averaging), and in-process stand-ins for
//! the content-addressed store, the hash-chained ledger, and the sealed
//! session envelope.

pub mod castore;
pub mod config;
pub mod hashring;
pub mod ledger;
pub mod partition;
pub mod rdfl;
pub mod sealed;
pub mod seeds;
pub mod sim;
pub mod tinynn;
