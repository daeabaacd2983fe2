use chacha20poly1305::aead::{AeadInOut, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Nonce, Tag};
use hkdf::Hkdf;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FieldElement, VaultError};
use crate::protocol::ClientId;
use crate::vector::GradientVector;

const KDF_SALT: &[u8] = b"smtfl/escrow/kdf/v1";
const NONCE_DOMAIN: &[u8] = b"smtfl/escrow/nonce/v1";

/// Identity of an escrowed message. `owner` is the receiver whose key seals
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub owner: ClientId,
    pub epoch: u32,
    pub group: u32,
    pub sender: ClientId,
}

impl RecordKey {
    /// `owner, epoch, group, sender` as little-endian u32s; also the AEAD
    /// associated data and the KDF info string.
    pub fn to_bytes(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[0..4].copy_from_slice(&self.owner.0.to_le_bytes());
        out[4..8].copy_from_slice(&self.epoch.to_le_bytes());
        out[8..12].copy_from_slice(&self.group.to_le_bytes());
        out[12..16].copy_from_slice(&self.sender.0.to_le_bytes());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedGradientRecord {
    pub key: RecordKey,
    pub nonce: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub tag: Vec<u8>,
}

/// HKDF-SHA256 over the secret's canonical bytes (value and modulus, LE),
/// salted per purpose and bound to the record metadata. 256-bit output.
fn derive_key(secret: FieldElement, key: &RecordKey) -> ChaCha20Poly1305 {
    let mut ikm = [0u8; 16];
    ikm[..8].copy_from_slice(&secret.value().to_le_bytes());
    ikm[8..].copy_from_slice(&secret.modulus().to_le_bytes());
    let hk = Hkdf::<Sha256>::new(Some(KDF_SALT), &ikm);
    let mut okm = [0u8; 32];
    hk.expand(&key.to_bytes(), &mut okm)
        .expect("32 bytes is a valid HKDF length");
    ChaCha20Poly1305::new_from_slice(&okm).expect("32-byte key")
}

/// 96-bit nonce: truncated SHA-256 of the seed and metadata, unique per
/// record key for a given seed.
fn derive_nonce(nonce_seed: u64, key: &RecordKey) -> [u8; 12] {
    let mut h = Sha256::new();
    h.update(NONCE_DOMAIN);
    h.update(nonce_seed.to_le_bytes());
    h.update(key.to_bytes());
    let d: [u8; 32] = h.finalize().into();
    d[..12].try_into().expect("12 bytes")
}

/// Seals a vector (canonical LE f64 encoding) under the owner's secret with
/// ChaCha20-Poly1305; the metadata is authenticated as associated data.
pub fn encrypt_record(
    plaintext: &GradientVector,
    owner_secret: FieldElement,
    key: RecordKey,
    nonce_seed: u64,
) -> EncryptedGradientRecord {
    let cipher = derive_key(owner_secret, &key);
    let nonce_bytes = derive_nonce(nonce_seed, &key);
    let nonce = Nonce::from(nonce_bytes);
    let mut buffer = plaintext.to_le_bytes();
    let tag = cipher
        .encrypt_inout_detached(&nonce, &key.to_bytes(), buffer.as_mut_slice().into())
        .expect("plaintext within ChaCha20-Poly1305 limits");
    EncryptedGradientRecord {
        key,
        nonce: nonce_bytes.to_vec(),
        ciphertext: buffer,
        tag: tag.to_vec(),
    }
}

/// Opens a record; every failure cause yields the same
/// [`VaultError::AuthenticationFailed`].
pub fn decrypt_record(
    record: &EncryptedGradientRecord,
    secret: FieldElement,
) -> Result<GradientVector, VaultError> {
    let nonce: [u8; 12] = record
        .nonce
        .as_slice()
        .try_into()
        .map_err(|_| VaultError::AuthenticationFailed)?;
    let tag: [u8; 16] = record
        .tag
        .as_slice()
        .try_into()
        .map_err(|_| VaultError::AuthenticationFailed)?;
    let cipher = derive_key(secret, &record.key);
    let mut buffer = record.ciphertext.clone();
    cipher
        .decrypt_inout_detached(
            &Nonce::from(nonce),
            &record.key.to_bytes(),
            buffer.as_mut_slice().into(),
            &Tag::from(tag),
        )
        .map_err(|_| VaultError::AuthenticationFailed)?;
    GradientVector::from_le_bytes(&buffer).map_err(|_| VaultError::AuthenticationFailed)
}
