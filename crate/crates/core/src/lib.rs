//! Secure model training for federated learning without trusted participants.
//!
//! The crate is a deterministic desk-scale simulator and library covering:
//!
//! - [`learning`]: datasets, non-IID partitioning, small models and local SGD.
//! - [`adversary`]: scripted poisoning behaviours and a closed-form gradient
//!   inversion oracle for linear models.
//! - [`protocol`]: grouping clients into triples, gradient splitting,
//!   per-epoch perturbation masks, the intra-group exchange and exact
//!   server-side unmasking.
//! - [`detector`]: the accuracy-delta scoring rule, the evaluation ledger and
//!   eviction.
//! - [`vault`]: Shamir sharing over a prime field, authenticated escrow of
//!   protocol messages and quorum decryption.
//! - [`recovery`]: per-epoch unlearning of malicious contributions and
//!   corrected-history replay.
//! - [`sim`]: scenario configuration, the epoch loop, metrics and sweeps.
//!
//! Every random choice is derived from a master seed through [`rng`], so a
//! scenario and its seed fully determine every output byte.

pub mod adversary;
pub mod detector;
pub mod learning;
pub mod protocol;
pub mod recovery;
pub mod rng;
pub mod sim;
pub mod vault;
pub mod vector;

pub use vector::{GradientVector, VectorError};
