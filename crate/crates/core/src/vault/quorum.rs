use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    decrypt_record, recover_secret, split_secret, FieldElement, PrimeField, RecordFilter,
    RecordKey, RecordStore, ShamirShare, ThresholdPolicy, VaultError,
};
use crate::protocol::ClientId;
use crate::rng;
use crate::vector::GradientVector;

/// A share of `owner`'s secret handed in by `holder`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareSubmission {
    pub holder: ClientId,
    pub owner: ClientId,
    pub share: ShamirShare,
}

/// Who holds which share. Built once at setup: for every owner, each peer
/// picks a random nonzero evaluation point and receives `(r, f_owner(r))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareBook {
    policy: ThresholdPolicy,
    field: PrimeField,
    holdings: BTreeMap<ClientId, BTreeMap<ClientId, ShamirShare>>,
}

impl ShareBook {
    pub fn new(policy: ThresholdPolicy, field: PrimeField) -> Self {
        Self {
            policy,
            field,
            holdings: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> ThresholdPolicy {
        self.policy
    }

    pub fn field(&self) -> PrimeField {
        self.field
    }

    /// Splits `owner`'s secret across `peers` (which must not include the
    /// owner and must number `m - 1`).
    pub fn distribute(
        &mut self,
        owner: ClientId,
        secret: FieldElement,
        peers: &[ClientId],
        seed: u64,
    ) -> Result<(), VaultError> {
        let mut used = BTreeSet::new();
        let points: Vec<FieldElement> = peers
            .iter()
            .map(|peer| {
                let mut r = rng::stream(
                    seed,
                    "vault/eval_point",
                    &[u64::from(owner.0), u64::from(peer.0)],
                );
                loop {
                    let x = self.field.random_nonzero(&mut r);
                    if used.insert(x.value()) {
                        break x;
                    }
                }
            })
            .collect();
        let shares = split_secret(
            secret,
            &self.policy,
            &points,
            rng::derive_seed(seed, "vault/split", &[u64::from(owner.0)]),
        )?;
        let entry = self.holdings.entry(owner).or_default();
        entry.clear();
        entry.extend(peers.iter().copied().zip(shares));
        Ok(())
    }

    pub fn share(&self, owner: ClientId, holder: ClientId) -> Option<ShamirShare> {
        self.holdings.get(&owner)?.get(&holder).copied()
    }

    /// What the online `providers` would hand in for the given owners.
    pub fn submissions(
        &self,
        providers: &[ClientId],
        owners: impl IntoIterator<Item = ClientId>,
    ) -> Vec<ShareSubmission> {
        let mut out = Vec::new();
        for owner in owners {
            for &holder in providers {
                if let Some(share) = self.share(owner, holder) {
                    out.push(ShareSubmission {
                        holder,
                        owner,
                        share,
                    });
                }
            }
        }
        out
    }

    /// Every share, for offline drills.
    pub fn all_submissions(&self) -> Vec<ShareSubmission> {
        self.holdings
            .iter()
            .flat_map(|(&owner, m)| {
                m.iter().map(move |(&holder, &share)| ShareSubmission {
                    holder,
                    owner,
                    share,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecryptedMessage {
    pub key: RecordKey,
    pub vector: GradientVector,
}

/// Result of a quorum decryption; partial failures are reported, not raised.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuorumReport {
    pub messages: Vec<DecryptedMessage>,
    /// Owners whose secret could not be rebuilt from the submitted shares.
    pub blocked_owners: BTreeSet<ClientId>,
    /// Epochs with at least one relevant record left sealed.
    pub blocked_epochs: BTreeSet<u32>,
}

impl QuorumReport {
    pub fn is_complete(&self) -> bool {
        self.blocked_owners.is_empty()
    }
}

/// Opens every record in `epochs` (inclusive) that `target` sent or received.
///
/// Records a target sent are sealed under the receivers' keys; records it
/// received are sealed under its own key. Each needed owner's secret is
/// rebuilt from the submissions for that owner (the owner itself need not
/// take part); owners with fewer than `t` valid shares are reported as
/// blocked along with the epochs they leave sealed.
pub fn quorum_decrypt(
    store: &RecordStore,
    target: ClientId,
    epochs: (u32, u32),
    submissions: &[ShareSubmission],
    policy: &ThresholdPolicy,
) -> Result<QuorumReport, VaultError> {
    let (first, last) = epochs;
    let range = RecordFilter::default().epochs(first, last);
    let mut relevant = store.fetch(&range.sender(target));
    relevant.extend(store.fetch(&range.owner(target)));
    relevant.sort_by_key(|r| (r.key.epoch, r.key.group, r.key.sender, r.key.owner));
    relevant.dedup_by_key(|r| r.key);

    let owners: BTreeSet<ClientId> = relevant.iter().map(|r| r.key.owner).collect();
    let mut secrets = BTreeMap::new();
    let mut report = QuorumReport::default();
    for owner in owners {
        let mut seen = BTreeSet::new();
        let shares: Vec<ShamirShare> = submissions
            .iter()
            .filter(|s| s.owner == owner && s.holder != owner && seen.insert(s.share.x.value()))
            .map(|s| s.share)
            .collect();
        match recover_secret(&shares, policy) {
            Ok(secret) => {
                secrets.insert(owner, secret);
            }
            Err(VaultError::InsufficientShares { .. }) => {
                report.blocked_owners.insert(owner);
            }
            Err(e) => return Err(e),
        }
    }
    for record in relevant {
        let opened = secrets
            .get(&record.key.owner)
            .map(|&s| decrypt_record(record, s));
        match opened {
            Some(Ok(vector)) => report.messages.push(DecryptedMessage {
                key: record.key,
                vector,
            }),
            Some(Err(_)) => {
                // Shares that interpolate to the wrong secret fail authentication.
                report.blocked_owners.insert(record.key.owner);
                report.blocked_epochs.insert(record.key.epoch);
            }
            None => {
                report.blocked_epochs.insert(record.key.epoch);
            }
        }
    }
    Ok(report)
}
