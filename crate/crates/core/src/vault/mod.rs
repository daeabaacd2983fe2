//! Threshold-gated escrow of protocol messages.
//!
//! Every client owns a random recovery secret `S_i` in a prime field. The
//! secret is Shamir-split into `m - 1` shares, one per peer, at evaluation
//! points the peers choose. Messages a client receives during group
//! aggregation are encrypted under a key derived from its secret and the
//! record metadata, then appended to the storage server's record file. Any
//! `t` peers can later rebuild `S_i` and open that client's records, without
//! the client being online.
//!
//! The per-client public/private key pair of the original design is modelled
//! symmetrically: the encryption key is `HKDF(S_i, metadata)` and no separate
//! public key is materialised. Confidentiality against the storage server and
//! quorum-gated recovery are unchanged.

mod escrow;
mod field;
mod quorum;
mod shamir;
pub(crate) mod store;

use thiserror::Error;

pub use escrow::{decrypt_record, encrypt_record, EncryptedGradientRecord, RecordKey};
pub use field::{FieldElement, PrimeField, DEFAULT_PRIME};
pub use quorum::{quorum_decrypt, DecryptedMessage, QuorumReport, ShareBook, ShareSubmission};
pub use shamir::{
    recover_secret, split_secret, split_with_polynomial, SecretPolynomial, ShamirShare,
    ThresholdPolicy,
};
pub use store::{RecordFilter, RecordStore, FORMAT_VERSION, MAGIC};

use crate::vector::VectorError;

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("value {value} is not reduced modulo {p}")]
    Unreduced { value: u64, p: u64 },
    #[error("field elements from different fields ({0} vs {1})")]
    FieldMismatch(u64, u64),
    #[error("invalid threshold policy m={m}, t={t}: need 1 <= t <= m - 1")]
    InvalidPolicy { m: usize, t: usize },
    #[error("expected {expected} evaluation points, got {actual}")]
    PointCount { expected: usize, actual: usize },
    #[error("evaluation point 0 would reveal the secret")]
    ZeroPoint,
    #[error("duplicate evaluation point {0}")]
    DuplicatePoint(u64),
    #[error("need {needed} shares, got {got}")]
    InsufficientShares { needed: usize, got: usize },
    /// Wrong key, tampered ciphertext, tag or metadata all map here.
    #[error("authentication failed")]
    AuthenticationFailed,
    #[error("duplicate record key {0:?}")]
    DuplicateRecord(RecordKey),
    #[error("record file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("record file io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Vector(#[from] VectorError),
}
