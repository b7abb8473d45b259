//! Per-pair session keys and sealed content hashes.
//!
//! On first contact between a sender and the receiver it forwards to, the
//! receiver generates a symmetric key and ships it encrypted under the
//! sender's public key. Afterwards every content hash between the two travels
//! as a sealed envelope:
//!
//! ```text
//! "SEAL" | key id (8 bytes) | cipher output
//! ```
//!
//! The concrete primitives sit behind [`KeyTransport`] and [`SymmetricCipher`].
//! [`Suite::standard`] uses X25519 + AES-256-GCM; [`Suite::toy`] is a
//! hash-based stream cipher with a keyed checksum and is NOT secure.

use std::collections::BTreeMap;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::castore::ContentHash;
use crate::hashring::NodeId;
use crate::seeds::derive_bytes;

/// Leading bytes of every sealed payload.
pub const SEAL_TAG: &[u8; 4] = b"SEAL";
const KEY_ID_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SealError {
    #[error("no keypair registered for {0}")]
    UnknownNode(String),
    #[error("node {0} already has a keypair")]
    DuplicateNode(String),
    #[error("ciphertext was sealed under a different session key")]
    WrongKey,
    #[error("ciphertext is corrupt")]
    CorruptCiphertext,
}

/// Asymmetric encryption used to transport session keys.
pub trait KeyTransport: Send + Sync {
    /// `(public, private)` from 32 bytes of seed material.
    fn keypair(&self, seed: [u8; 32]) -> (Vec<u8>, Vec<u8>);
    fn encrypt(&self, public: &[u8], msg: &[u8], seed: [u8; 32]) -> Vec<u8>;
    fn decrypt(&self, private: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, SealError>;
}

/// Authenticated symmetric encryption.
pub trait SymmetricCipher: Send + Sync {
    fn key_len(&self) -> usize;
    fn encrypt(&self, key: &[u8], nonce_seed: [u8; 32], plaintext: &[u8]) -> Vec<u8>;
    fn decrypt(&self, key: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, SealError>;
}

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn aes_encrypt(key: &[u8; 32], nonce: &[u8; 12], plaintext: &[u8]) -> Vec<u8> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    cipher
        .encrypt(Nonce::from_slice(nonce), plaintext)
        .expect("AES-GCM encryption does not fail on in-memory buffers")
}

fn aes_decrypt(key: &[u8; 32], nonce: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    cipher
        .decrypt(Nonce::from_slice(nonce), ciphertext)
        .map_err(|_| SealError::CorruptCiphertext)
}

/// ECIES-style transport: ephemeral X25519, SHA-256 KDF, AES-256-GCM.
/// Output: `ephemeral public (32) | nonce (12) | ciphertext+tag`.
#[derive(Debug, Default, Clone, Copy)]
pub struct X25519Transport;

impl KeyTransport for X25519Transport {
    fn keypair(&self, seed: [u8; 32]) -> (Vec<u8>, Vec<u8>) {
        let secret = StaticSecret::from(seed);
        let public = PublicKey::from(&secret);
        (public.as_bytes().to_vec(), secret.to_bytes().to_vec())
    }

    fn encrypt(&self, public: &[u8], msg: &[u8], seed: [u8; 32]) -> Vec<u8> {
        let recipient =
            PublicKey::from(<[u8; 32]>::try_from(public).expect("32-byte X25519 public key"));
        let eph = StaticSecret::from(seed);
        let eph_pub = PublicKey::from(&eph);
        let shared = eph.diffie_hellman(&recipient);
        let key = sha256(&[b"gfl-ecies", shared.as_bytes(), eph_pub.as_bytes(), public]);
        let nonce: [u8; 12] = sha256(&[b"gfl-ecies-nonce", &seed])[..12]
            .try_into()
            .unwrap();
        let mut out = eph_pub.as_bytes().to_vec();
        out.extend_from_slice(&nonce);
        out.extend(aes_encrypt(&key, &nonce, msg));
        out
    }

    fn decrypt(&self, private: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
        if ciphertext.len() < 32 + 12 + 16 {
            return Err(SealError::CorruptCiphertext);
        }
        let secret =
            StaticSecret::from(<[u8; 32]>::try_from(private).map_err(|_| SealError::WrongKey)?);
        let own_pub = PublicKey::from(&secret);
        let eph_pub = PublicKey::from(<[u8; 32]>::try_from(&ciphertext[..32]).unwrap());
        let shared = secret.diffie_hellman(&eph_pub);
        let key = sha256(&[
            b"gfl-ecies",
            shared.as_bytes(),
            eph_pub.as_bytes(),
            own_pub.as_bytes(),
        ]);
        aes_decrypt(&key, &ciphertext[32..44], &ciphertext[44..])
    }
}

/// AES-256-GCM. Output: `nonce (12) | ciphertext+tag`.
#[derive(Debug, Default, Clone, Copy)]
pub struct AesGcmCipher;

impl SymmetricCipher for AesGcmCipher {
    fn key_len(&self) -> usize {
        32
    }

    fn encrypt(&self, key: &[u8], nonce_seed: [u8; 32], plaintext: &[u8]) -> Vec<u8> {
        let key: &[u8; 32] = key.try_into().expect("32-byte AES key");
        let nonce: [u8; 12] = nonce_seed[..12].try_into().unwrap();
        let mut out = nonce.to_vec();
        out.extend(aes_encrypt(key, &nonce, plaintext));
        out
    }

    fn decrypt(&self, key: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
        let key: &[u8; 32] = key.try_into().map_err(|_| SealError::WrongKey)?;
        if ciphertext.len() < 12 + 16 {
            return Err(SealError::CorruptCiphertext);
        }
        aes_decrypt(key, &ciphertext[..12], &ciphertext[12..])
    }
}

fn toy_keystream_xor(key: &[u8], nonce: &[u8], data: &[u8]) -> Vec<u8> {
    data.chunks(32)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let block = sha256(&[b"toy-stream", key, nonce, &(i as u64).to_le_bytes()]);
            chunk
                .iter()
                .zip(block)
                .map(|(d, k)| d ^ k)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Toy transport: `public = H(private)`, so anyone holding the public key can
/// decrypt. Interface-compatible only.
#[derive(Debug, Default, Clone, Copy)]
pub struct ToyTransport;

impl KeyTransport for ToyTransport {
    fn keypair(&self, seed: [u8; 32]) -> (Vec<u8>, Vec<u8>) {
        (sha256(&[b"toy-pub", &seed]).to_vec(), seed.to_vec())
    }

    fn encrypt(&self, public: &[u8], msg: &[u8], seed: [u8; 32]) -> Vec<u8> {
        let nonce = &seed[..8];
        let body = toy_keystream_xor(public, nonce, msg);
        let check = sha256(&[b"toy-check", public, nonce, &body]);
        [nonce, &body, &check[..4]].concat()
    }

    fn decrypt(&self, private: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
        if ciphertext.len() < 12 {
            return Err(SealError::CorruptCiphertext);
        }
        let public = sha256(&[b"toy-pub", private]);
        let (nonce, rest) = ciphertext.split_at(8);
        let (body, check) = rest.split_at(rest.len() - 4);
        if sha256(&[b"toy-check", &public, nonce, body])[..4] != *check {
            return Err(SealError::CorruptCiphertext);
        }
        Ok(toy_keystream_xor(&public, nonce, body))
    }
}

/// Toy cipher: SHA-256 counter-mode keystream plus an 8-byte keyed checksum.
/// Output: `nonce (8) | body | checksum (8)`.
#[derive(Debug, Default, Clone, Copy)]
pub struct ToyCipher;

impl SymmetricCipher for ToyCipher {
    fn key_len(&self) -> usize {
        16
    }

    fn encrypt(&self, key: &[u8], nonce_seed: [u8; 32], plaintext: &[u8]) -> Vec<u8> {
        let nonce = &nonce_seed[..8];
        let body = toy_keystream_xor(key, nonce, plaintext);
        let check = sha256(&[b"toy-mac", key, nonce, &body]);
        [nonce, &body, &check[..8]].concat()
    }

    fn decrypt(&self, key: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
        if ciphertext.len() < 16 {
            return Err(SealError::CorruptCiphertext);
        }
        let (nonce, rest) = ciphertext.split_at(8);
        let (body, check) = rest.split_at(rest.len() - 8);
        if sha256(&[b"toy-mac", key, nonce, body])[..8] != *check {
            return Err(SealError::CorruptCiphertext);
        }
        Ok(toy_keystream_xor(key, nonce, body))
    }
}

/// A key-transport scheme paired with a symmetric cipher.
pub struct Suite {
    pub transport: Box<dyn KeyTransport>,
    pub cipher: Box<dyn SymmetricCipher>,
}

impl Suite {
    pub fn standard() -> Self {
        Self {
            transport: Box::new(X25519Transport),
            cipher: Box::new(AesGcmCipher),
        }
    }

    pub fn toy() -> Self {
        Self {
            transport: Box::new(ToyTransport),
            cipher: Box::new(ToyCipher),
        }
    }
}

impl std::fmt::Debug for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Suite")
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public: Vec<u8>,
    pub private: Vec<u8>,
    pub owner: NodeId,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("owner", &self.owner)
            .field("public", &hex::encode(&self.public))
            .finish_non_exhaustive()
    }
}

/// Directional session between the node that sends hashes and the node that
/// receives them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub sym_key: Vec<u8>,
    pub established_round: usize,
}

impl Session {
    fn key_id(&self) -> [u8; KEY_ID_LEN] {
        sha256(&[b"gfl-key-id", &self.sym_key])[..KEY_ID_LEN]
            .try_into()
            .unwrap()
    }
}

/// Result of [`KeyRegistry::establish`].
#[derive(Debug, Clone)]
pub struct Handshake {
    pub session: Session,
    /// The encrypted key as shipped receiver -> sender; `None` when cached.
    pub transported: Option<Vec<u8>>,
}

impl Handshake {
    pub fn transported_bytes(&self) -> usize {
        self.transported.as_ref().map_or(0, Vec::len)
    }
}

/// Node keypairs and cached sessions for one experiment.
#[derive(Debug)]
pub struct KeyRegistry {
    seed: u64,
    suite: Suite,
    keys: BTreeMap<NodeId, KeyPair>,
    sessions: BTreeMap<(NodeId, NodeId), Session>,
    handshakes: usize,
}

impl KeyRegistry {
    pub fn new(seed: u64, suite: Suite) -> Self {
        Self {
            seed,
            suite,
            keys: BTreeMap::new(),
            sessions: BTreeMap::new(),
            handshakes: 0,
        }
    }

    pub fn register(&mut self, node: &NodeId) -> Result<&KeyPair, SealError> {
        if self.keys.contains_key(node) {
            return Err(SealError::DuplicateNode(node.to_string()));
        }
        let material = derive_bytes(self.seed, &[b"keypair", node.as_str().as_bytes()]);
        let (public, private) = self.suite.transport.keypair(material);
        let pair = KeyPair {
            public,
            private,
            owner: node.clone(),
        };
        Ok(self.keys.entry(node.clone()).or_insert(pair))
    }

    pub fn keypair(&self, node: &NodeId) -> Option<&KeyPair> {
        self.keys.get(node)
    }

    pub fn session(&self, sender: &NodeId, receiver: &NodeId) -> Option<&Session> {
        self.sessions.get(&(sender.clone(), receiver.clone()))
    }

    /// Number of key transports performed so far.
    pub fn handshake_count(&self) -> usize {
        self.handshakes
    }

    /// Returns the cached session for `(sender, receiver)` or runs the
    /// first-contact exchange: the receiver draws a key and encrypts it under
    /// the sender's public key; the sender decrypts it with its private key.
    pub fn establish(
        &mut self,
        sender: &NodeId,
        receiver: &NodeId,
        round: usize,
    ) -> Result<Handshake, SealError> {
        let sender_keys = self
            .keys
            .get(sender)
            .ok_or_else(|| SealError::UnknownNode(sender.to_string()))?;
        if !self.keys.contains_key(receiver) {
            return Err(SealError::UnknownNode(receiver.to_string()));
        }
        let pair = (sender.clone(), receiver.clone());
        if let Some(s) = self.sessions.get(&pair) {
            return Ok(Handshake {
                session: s.clone(),
                transported: None,
            });
        }
        let path: [&[u8]; 3] = [
            b"session",
            sender.as_str().as_bytes(),
            receiver.as_str().as_bytes(),
        ];
        let generated = derive_bytes(self.seed, &path)[..self.suite.cipher.key_len()].to_vec();
        let wrap_seed = derive_bytes(self.seed, &[b"session-wrap", path[1], path[2]]);
        let wire = self
            .suite
            .transport
            .encrypt(&sender_keys.public, &generated, wrap_seed);
        let sym_key = self.suite.transport.decrypt(&sender_keys.private, &wire)?;
        debug_assert_eq!(sym_key, generated);
        let session = Session {
            sender: sender.clone(),
            receiver: receiver.clone(),
            sym_key,
            established_round: round,
        };
        self.sessions.insert(pair, session.clone());
        self.handshakes += 1;
        Ok(Handshake {
            session,
            transported: Some(wire),
        })
    }

    pub fn decrypt_transport(&self, node: &NodeId, wire: &[u8]) -> Result<Vec<u8>, SealError> {
        let keys = self
            .keys
            .get(node)
            .ok_or_else(|| SealError::UnknownNode(node.to_string()))?;
        self.suite.transport.decrypt(&keys.private, wire)
    }

    pub fn seal(&self, session: &Session, hash: &ContentHash) -> Vec<u8> {
        seal_with(self.suite.cipher.as_ref(), session, hash)
    }

    pub fn open(&self, session: &Session, payload: &[u8]) -> Result<ContentHash, SealError> {
        open_with(self.suite.cipher.as_ref(), session, payload)
    }
}

/// Seals `hash`. Deterministic in `(session, hash)`.
pub fn seal_with(cipher: &dyn SymmetricCipher, session: &Session, hash: &ContentHash) -> Vec<u8> {
    let nonce_seed = sha256(&[b"gfl-seal-nonce", &session.sym_key, hash.as_bytes()]);
    let mut out = SEAL_TAG.to_vec();
    out.extend_from_slice(&session.key_id());
    out.extend(cipher.encrypt(&session.sym_key, nonce_seed, hash.as_bytes()));
    out
}

pub fn open_with(
    cipher: &dyn SymmetricCipher,
    session: &Session,
    payload: &[u8],
) -> Result<ContentHash, SealError> {
    let rest = payload
        .strip_prefix(SEAL_TAG.as_slice())
        .ok_or(SealError::CorruptCiphertext)?;
    if rest.len() < KEY_ID_LEN {
        return Err(SealError::CorruptCiphertext);
    }
    let (key_id, body) = rest.split_at(KEY_ID_LEN);
    if key_id != session.key_id() {
        return Err(SealError::WrongKey);
    }
    let plain = cipher.decrypt(&session.sym_key, body)?;
    ContentHash::parse_bytes(&plain).map_err(|_| SealError::CorruptCiphertext)
}

/// True when `payload` carries the sealed-envelope tag.
pub fn is_sealed(payload: &[u8]) -> bool {
    payload.starts_with(SEAL_TAG)
}
