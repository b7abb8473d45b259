//! Content-addressed blob store.
//!
//! Keys are `"Qm"` followed by the base58 encoding of the SHA-256 digest of
//! the blob, left-padded with `'1'` (base58 zero) to 44 characters, for a
//! fixed 46-character address.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const HASH_LEN: usize = 46;
const PREFIX: &str = "Qm";
const BODY_LEN: usize = HASH_LEN - PREFIX.len();
const BASE58_ALPHABET: &str = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("refusing to store an empty blob")]
    EmptyBlob,
    #[error("no blob stored under {0}")]
    NotFound(ContentHash),
    #[error("blob under {0} fails digest verification")]
    CorruptBlob(ContentHash),
    #[error("invalid content hash: {0}")]
    InvalidHash(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(String);

impl ContentHash {
    /// Address of `bytes`. Pure function of the content.
    pub fn of(bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        let body = bs58::encode(digest).into_string();
        debug_assert!(body.len() <= BODY_LEN);
        let mut text = String::with_capacity(HASH_LEN);
        text.push_str(PREFIX);
        text.extend(std::iter::repeat_n(
            '1',
            BODY_LEN.saturating_sub(body.len()),
        ));
        text.push_str(&body[body.len().saturating_sub(BODY_LEN)..]);
        ContentHash(text)
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        if text.len() != HASH_LEN {
            return Err(StoreError::InvalidHash(format!("length {}", text.len())));
        }
        if !text.starts_with(PREFIX) {
            return Err(StoreError::InvalidHash("missing Qm prefix".into()));
        }
        if !text[PREFIX.len()..]
            .chars()
            .all(|c| BASE58_ALPHABET.contains(c))
        {
            return Err(StoreError::InvalidHash("non-base58 character".into()));
        }
        Ok(ContentHash(text.to_owned()))
    }

    /// Parses raw bytes as a plaintext content hash.
    pub fn parse_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let text =
            std::str::from_utf8(bytes).map_err(|_| StoreError::InvalidHash("not utf-8".into()))?;
        Self::parse(text)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ContentHash {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Outcome of a put: the address and how many bytes were newly stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutReceipt {
    pub hash: ContentHash,
    pub stored_bytes: usize,
}

/// Single logical store shared by all trusted nodes.
#[derive(Debug, Default, Clone)]
pub struct Store {
    blobs: HashMap<ContentHash, Vec<u8>>,
    byte_count: usize,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, bytes: &[u8]) -> Result<ContentHash, StoreError> {
        self.put_counted(bytes).map(|r| r.hash)
    }

    /// Like [`Store::put`], also reporting bytes added (0 on a dedup hit).
    pub fn put_counted(&mut self, bytes: &[u8]) -> Result<PutReceipt, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        let hash = ContentHash::of(bytes);
        let mut stored_bytes = 0;
        self.blobs.entry(hash.clone()).or_insert_with(|| {
            stored_bytes = bytes.len();
            bytes.to_vec()
        });
        self.byte_count += stored_bytes;
        Ok(PutReceipt { hash, stored_bytes })
    }

    /// Returns the blob after re-verifying its digest.
    pub fn get(&self, hash: &ContentHash) -> Result<&[u8], StoreError> {
        let blob = self
            .blobs
            .get(hash)
            .ok_or_else(|| StoreError::NotFound(hash.clone()))?;
        if &ContentHash::of(blob) != hash {
            return Err(StoreError::CorruptBlob(hash.clone()));
        }
        Ok(blob)
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.blobs.contains_key(hash)
    }

    pub fn byte_count(&self) -> usize {
        self.byte_count
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    /// Test hook: flips one bit of a stored blob in place.
    #[doc(hidden)]
    pub fn corrupt_bit(&mut self, hash: &ContentHash, bit: usize) -> bool {
        match self.blobs.get_mut(hash) {
            Some(blob) if bit / 8 < blob.len() => {
                blob[bit / 8] ^= 1 << (bit % 8);
                true
            }
            _ => false,
        }
    }
}
