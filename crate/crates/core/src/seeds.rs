//! Seed derivation. Every random stream in a run is keyed by the master seed
//! plus a label path, so results never depend on evaluation order.

use sha2::{Digest, Sha256};

fn digest(master: u64, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update((p.len() as u32).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn derive_seed(master: u64, parts: &[&[u8]]) -> u64 {
    let d = digest(master, parts);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn derive_bytes(master: u64, parts: &[&[u8]]) -> [u8; 32] {
    digest(master, parts)
}
