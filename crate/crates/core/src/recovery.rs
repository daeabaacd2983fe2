//! Unlearning malicious contributions from the update history.
//!
//! The server keeps one [`EpochRecord`] per epoch: the accepted groups, their
//! unmasked sums, the masked uploads it received and the update it applied.
//! Once attackers are identified and their per-epoch gradients have been
//! rebuilt from escrow, [`unlearn_epoch`] recomputes each epoch's update as
//!
//! ```text
//! (sum of accepted group sums - sum_j w_j * g_mali_j) / (m_e - k_e)
//! ```
//!
//! where `m_e` counts the members of accepted groups and `k_e` the attackers
//! among them, and [`replay_corrected`] applies the corrected updates in
//! order from the initial model.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::{LearningError, Model};
use crate::protocol::{aggregate_global, ClientId, Group, PerturbationVector, ProtocolError};
use crate::vault::store::{encode_header, Reader};
use crate::vault::VaultError;
use crate::vector::{GradientVector, VectorError};

/// Type tag of a history record; escrow records carry no tag.
pub const HISTORY_RECORD_TAG: u8 = 2;

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(
        "{k} malicious of {m} contributing clients in epoch {epoch} leaves no honest gradient"
    )]
    NoHonestContributors { epoch: u32, m: usize, k: usize },
    #[error("no recovered gradient for malicious client {client} in epoch {epoch}")]
    MissingMaliciousGradient { client: ClientId, epoch: u32 },
    #[error("history is not strictly ordered by epoch at epoch {0}")]
    Unordered(u32),
    #[error("epoch record {epoch} is inconsistent: {reason}")]
    InconsistentRecord { epoch: u32, reason: String },
    #[error("weight for {client} must be finite, got {weight}")]
    InvalidWeight { client: ClientId, weight: f64 },
    #[error(
        "escrowed {what} from {sender} to {receiver} is missing for group {group} in epoch {epoch}"
    )]
    MissingMessage {
        what: &'static str,
        sender: ClientId,
        receiver: ClientId,
        epoch: u32,
        group: u32,
    },
    #[error("{client} is not a member of group {group} in epoch {epoch}")]
    NotAMember {
        client: ClientId,
        epoch: u32,
        group: u32,
    },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Vault(#[from] VaultError),
}

/// What the server retained for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Accepted groups, aligned with `sums` and `uploads`.
    pub groups: Vec<Group>,
    /// Unmasked group sums.
    pub sums: Vec<GradientVector>,
    /// Masked group sums as uploaded by each aggregator.
    pub uploads: Vec<GradientVector>,
    pub member_count: usize,
    pub global_update: GradientVector,
}

impl EpochRecord {
    /// Builds the record and derives the applied update; an epoch with no
    /// accepted group applies the zero update.
    pub fn new(
        epoch: u32,
        groups: Vec<Group>,
        sums: Vec<GradientVector>,
        uploads: Vec<GradientVector>,
        dim: usize,
    ) -> Result<Self, RecoveryError> {
        if groups.len() != sums.len() || groups.len() != uploads.len() {
            return Err(RecoveryError::InconsistentRecord {
                epoch,
                reason: format!(
                    "{} groups, {} sums, {} uploads",
                    groups.len(),
                    sums.len(),
                    uploads.len()
                ),
            });
        }
        for v in sums.iter().chain(&uploads) {
            v.check_dim(dim)?;
        }
        let member_count = 3 * groups.len();
        let global_update = if groups.is_empty() {
            GradientVector::zeros(dim)
        } else {
            aggregate_global(&sums, member_count)?
        };
        Ok(Self {
            epoch,
            groups,
            sums,
            uploads,
            member_count,
            global_update,
        })
    }

    pub fn dim(&self) -> usize {
        self.global_update.dim()
    }

    /// Re-derives the update from the sums and compares bitwise.
    pub fn verify(&self) -> Result<(), RecoveryError> {
        let fresh = Self::new(
            self.epoch,
            self.groups.clone(),
            self.sums.clone(),
            self.uploads.clone(),
            self.dim(),
        )?;
        if fresh.member_count != self.member_count || fresh.global_update != self.global_update {
            return Err(RecoveryError::InconsistentRecord {
                epoch: self.epoch,
                reason: "stored update does not match its group sums".into(),
            });
        }
        Ok(())
    }

    pub fn group(&self, index: u32) -> Option<(usize, &Group)> {
        self.groups
            .iter()
            .enumerate()
            .find(|(_, g)| g.index == index)
    }
}

/// Who to unlearn and what they contributed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub malicious: BTreeSet<ClientId>,
    /// Recovered gradients keyed by `(client, epoch)`.
    pub gradients: BTreeMap<(ClientId, u32), GradientVector>,
    /// Per-client weights; absent means 1.
    pub weights: BTreeMap<ClientId, f64>,
    /// `(epoch, group index)` pairs whose whole sum is discarded because
    /// the evidence to isolate the attacker was incomplete.
    pub dropped: BTreeSet<(u32, u32)>,
}

impl UnlearnRequest {
    pub fn new(malicious: impl IntoIterator<Item = ClientId>) -> Self {
        Self {
            malicious: malicious.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn weight(&self, client: ClientId) -> f64 {
        self.weights.get(&client).copied().unwrap_or(1.0)
    }

    pub fn with_gradient(mut self, client: ClientId, epoch: u32, g: GradientVector) -> Self {
        self.gradients.insert((client, epoch), g);
        self
    }
}

/// The corrected update for one epoch.
pub fn unlearn_epoch(
    record: &EpochRecord,
    request: &UnlearnRequest,
) -> Result<GradientVector, RecoveryError> {
    let mut total: Option<GradientVector> = None;
    let mut m = 0usize;
    let mut mali = Vec::new();
    for (group, sum) in record.groups.iter().zip(&record.sums) {
        if request.dropped.contains(&(record.epoch, group.index)) {
            continue;
        }
        sum.check_dim(record.dim())?;
        match total.as_mut() {
            Some(t) => t.add_assign(sum)?,
            None => total = Some(sum.clone()),
        }
        m += 3;
        mali.extend(
            group
                .members
                .iter()
                .copied()
                .filter(|c| request.malicious.contains(c)),
        );
    }
    let k = mali.len();
    let Some(mut total) = total.filter(|_| k < m) else {
        return Err(RecoveryError::NoHonestContributors {
            epoch: record.epoch,
            m,
            k,
        });
    };
    for client in mali {
        let w = request.weight(client);
        if !w.is_finite() {
            return Err(RecoveryError::InvalidWeight { client, weight: w });
        }
        let g = request.gradients.get(&(client, record.epoch)).ok_or(
            RecoveryError::MissingMaliciousGradient {
                client,
                epoch: record.epoch,
            },
        )?;
        if w == 1.0 {
            total.sub_assign(g)?;
        } else {
            total.sub_assign(&g.scale(w))?;
        }
    }
    Ok(total.scale(1.0 / (m - k) as f64))
}

/// Replays the history from `initial` with every epoch's update replaced by
/// its corrected form. Epochs left with no honest contributor apply nothing.
pub fn replay_corrected(
    initial: &Model,
    history: &[EpochRecord],
    request: &UnlearnRequest,
) -> Result<Model, RecoveryError> {
    let mut model = initial.clone();
    let mut last = None;
    for record in history {
        if last.is_some_and(|e| record.epoch <= e) {
            return Err(RecoveryError::Unordered(record.epoch));
        }
        last = Some(record.epoch);
        match unlearn_epoch(record, request) {
            Ok(update) => model = model.apply_update(&update)?,
            Err(RecoveryError::NoHonestContributors { epoch, m, k }) => {
                log::debug!("epoch {epoch}: {k} of {m} contributors malicious, update skipped");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(model)
}

/// Everything the server can assemble about one group after a quorum
/// decryption.
#[derive(Debug, Clone, Copy)]
pub struct GroupEvidence<'a> {
    pub group: &'a Group,
    /// Decrypted intra-group messages keyed by `(sender, receiver)`.
    pub messages: &'a BTreeMap<(ClientId, ClientId), GradientVector>,
    /// Masks of A, B and C for the epoch.
    pub epsilons: [&'a PerturbationVector; 3],
    /// The masked sum the aggregator uploaded.
    pub upload: &'a GradientVector,
}

impl GroupEvidence<'_> {
    fn message(
        &self,
        what: &'static str,
        sender: ClientId,
        receiver: ClientId,
    ) -> Result<&GradientVector, RecoveryError> {
        self.messages
            .get(&(sender, receiver))
            .ok_or(RecoveryError::MissingMessage {
                what,
                sender,
                receiver,
                epoch: self.group.epoch,
                group: self.group.index,
            })
    }
}

/// Rebuilds one member's gradient from the group's escrowed messages and the
/// server's mask knowledge.
///
/// * splitter: `share1 + masked_share2 - e_A`
/// * relay: `relay_sum - masked_share2 - e_B`
/// * aggregator: `upload - share1 - relay_sum - e_C`
pub fn reconstruct_gradient(
    target: ClientId,
    evidence: &GroupEvidence<'_>,
) -> Result<GradientVector, RecoveryError> {
    let group = evidence.group;
    let [a, b, c] = group.members;
    let [e_a, e_b, e_c] = evidence.epsilons;
    let share1 = || evidence.message("share1", a, c);
    let masked = || evidence.message("masked_share2", a, b);
    let relay = || evidence.message("relay_sum", b, c);
    let g = if target == a {
        share1()?.add(masked()?)?.sub(&e_a.values)?
    } else if target == b {
        relay()?.sub(masked()?)?.sub(&e_b.values)?
    } else if target == c {
        evidence
            .upload
            .sub(share1()?)?
            .sub(relay()?)?
            .sub(&e_c.values)?
    } else {
        return Err(RecoveryError::NotAMember {
            client: target,
            epoch: group.epoch,
            group: group.index,
        });
    };
    Ok(g)
}

fn put_vector(out: &mut Vec<u8>, v: &GradientVector) {
    out.extend((v.dim() as u32).to_le_bytes());
    out.extend(v.to_le_bytes());
}

fn encode_epoch(record: &EpochRecord) -> Vec<u8> {
    let mut out = vec![HISTORY_RECORD_TAG];
    out.extend(record.epoch.to_le_bytes());
    out.extend((record.groups.len() as u32).to_le_bytes());
    for ((group, sum), upload) in record.groups.iter().zip(&record.sums).zip(&record.uploads) {
        out.extend(group.index.to_le_bytes());
        for id in group.members {
            out.extend(id.0.to_le_bytes());
        }
        put_vector(&mut out, sum);
        put_vector(&mut out, upload);
    }
    put_vector(&mut out, &record.global_update);
    out
}

fn read_vector(r: &mut Reader<'_>) -> Result<GradientVector, RecoveryError> {
    let n = r.u32()? as usize;
    let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    Ok(GradientVector::new(values)?)
}

/// Writes the history with the escrow store's header and framing.
pub fn save_history(path: &Path, p: u64, history: &[EpochRecord]) -> Result<(), RecoveryError> {
    let mut bytes = encode_header(p).to_vec();
    for record in history {
        bytes.extend(encode_epoch(record));
    }
    let mut file = fs::File::create(path).map_err(VaultError::from)?;
    file.write_all(&bytes).map_err(VaultError::from)?;
    Ok(())
}

/// Reads a history file, re-verifying every record. Returns the prime from
/// the header alongside the records.
pub fn load_history(path: &Path) -> Result<(u64, Vec<EpochRecord>), RecoveryError> {
    let bytes = fs::read(path).map_err(VaultError::from)?;
    let mut r = Reader::new(&bytes, path);
    let p = r.header()?;
    let mut history = Vec::new();
    while !r.at_end() {
        let tag = r.u8()?;
        if tag != HISTORY_RECORD_TAG {
            return Err(r.fail(format!("unexpected record tag {tag}")).into());
        }
        let epoch = r.u32()?;
        let n = r.u32()? as usize;
        let (mut groups, mut sums, mut uploads) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let index = r.u32()?;
            let members = [ClientId(r.u32()?), ClientId(r.u32()?), ClientId(r.u32()?)];
            groups.push(Group {
                epoch,
                index,
                members,
            });
            sums.push(read_vector(&mut r)?);
            uploads.push(read_vector(&mut r)?);
        }
        let global_update = read_vector(&mut r)?;
        let record = EpochRecord {
            epoch,
            groups,
            sums,
            uploads,
            member_count: 3 * n,
            global_update,
        };
        record.verify()?;
        history.push(record);
    }
    Ok((p, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::Architecture;
    use crate::protocol::{negotiate_epsilon, run_group_round, server_recover};

    fn v(values: &[f64]) -> GradientVector {
        GradientVector::new(values.to_vec()).unwrap()
    }

    fn group(epoch: u32, index: u32, ids: [u32; 3]) -> Group {
        Group {
            epoch,
            index,
            members: ids.map(ClientId),
        }
    }

    fn record(epoch: u32, groups: Vec<Group>, sums: Vec<GradientVector>) -> EpochRecord {
        let dim = sums.first().map_or(2, GradientVector::dim);
        let uploads = sums.clone();
        EpochRecord::new(epoch, groups, sums, uploads, dim).unwrap()
    }

    #[test]
    fn empty_request_reproduces_applied_update_bitwise() {
        let r = record(
            0,
            vec![group(0, 0, [0, 1, 2]), group(0, 1, [3, 4, 5])],
            vec![v(&[0.3, -1.7]), v(&[2.2, 0.1])],
        );
        assert_eq!(
            unlearn_epoch(&r, &UnlearnRequest::default()).unwrap(),
            r.global_update
        );
        r.verify().unwrap();
    }

    #[test]
    fn one_malicious_aggregator_leaves_pair_mean() {
        let (ga, gb, gc) = (v(&[1.0, 2.0]), v(&[3.0, -4.0]), v(&[100.0, 50.0]));
        let sum = ga.add(&gb).unwrap().add(&gc).unwrap();
        let r = record(0, vec![group(0, 0, [0, 1, 2])], vec![sum]);
        let req = UnlearnRequest::new([ClientId(2)]).with_gradient(ClientId(2), 0, gc);
        assert_eq!(unlearn_epoch(&r, &req).unwrap(), v(&[2.0, -1.0]));
    }

    #[test]
    fn all_but_one_malicious_leaves_that_gradient() {
        let (ga, gb, gc) = (v(&[1.5, 2.0]), v(&[3.0, -4.0]), v(&[-7.0, 0.25]));
        let sum = ga.add(&gb).unwrap().add(&gc).unwrap();
        let r = record(4, vec![group(4, 0, [7, 8, 9])], vec![sum]);
        let req = UnlearnRequest::new([ClientId(7), ClientId(9)])
            .with_gradient(ClientId(7), 4, ga)
            .with_gradient(ClientId(9), 4, gc);
        assert_eq!(unlearn_epoch(&r, &req).unwrap(), gb);
    }

    #[test]
    fn weights_scale_the_subtraction() {
        let sum = v(&[6.0, 6.0]);
        let r = record(0, vec![group(0, 0, [0, 1, 2])], vec![sum]);
        let mut req =
            UnlearnRequest::new([ClientId(0)]).with_gradient(ClientId(0), 0, v(&[2.0, 4.0]));
        req.weights.insert(ClientId(0), 0.5);
        assert_eq!(unlearn_epoch(&r, &req).unwrap(), v(&[2.5, 2.0]));
    }

    #[test]
    fn errors_on_missing_gradient_and_no_honest_member() {
        let r = record(0, vec![group(0, 0, [0, 1, 2])], vec![v(&[1.0, 1.0])]);
        assert!(matches!(
            unlearn_epoch(&r, &UnlearnRequest::new([ClientId(1)])),
            Err(RecoveryError::MissingMaliciousGradient {
                client: ClientId(1),
                epoch: 0
            })
        ));
        let all = UnlearnRequest::new([ClientId(0), ClientId(1), ClientId(2)]);
        assert!(matches!(
            unlearn_epoch(&r, &all),
            Err(RecoveryError::NoHonestContributors { m: 3, k: 3, .. })
        ));
        // A malicious client outside the accepted groups needs no gradient.
        let outside = UnlearnRequest::new([ClientId(40)]);
        assert_eq!(unlearn_epoch(&r, &outside).unwrap(), r.global_update);
    }

    #[test]
    fn dropped_group_leaves_the_rest() {
        let r = record(
            2,
            vec![group(2, 0, [0, 1, 2]), group(2, 1, [3, 4, 5])],
            vec![v(&[3.0, 3.0]), v(&[30.0, 60.0])],
        );
        let mut req = UnlearnRequest::new([ClientId(4)]);
        req.dropped.insert((2, 1));
        assert_eq!(unlearn_epoch(&r, &req).unwrap(), v(&[1.0, 1.0]));
    }

    fn model(dim_features: usize) -> Model {
        Model::new(Architecture::LogisticRegression, dim_features, 2, 0).unwrap()
    }

    #[test]
    fn replay_with_zero_malicious_uploads_is_a_rescaling() {
        let initial = model(1);
        let dim = initial.dim();
        let honest = |e: u32| {
            GradientVector::new(
                (0..dim)
                    .map(|i| f64::from(e + 1) * (i as f64 + 0.5))
                    .collect(),
            )
            .unwrap()
        };
        let mut history = Vec::new();
        let mut original = initial.clone();
        let mut expected = initial.clone();
        for e in 0..4 {
            // Clients 0 and 1 honest with identical gradients, 2 uploads zeros.
            let sum = honest(e).scale(2.0);
            let r = record(e, vec![group(e, 0, [0, 1, 2])], vec![sum.clone()]);
            original = original.apply_update(&r.global_update).unwrap();
            expected = expected.apply_update(&sum.scale(0.5)).unwrap();
            history.push(r);
        }
        let none = replay_corrected(&initial, &history, &UnlearnRequest::default()).unwrap();
        assert_eq!(none, original);
        let mut req = UnlearnRequest::new([ClientId(2)]);
        for e in 0..4 {
            req = req.with_gradient(ClientId(2), e, GradientVector::zeros(dim));
        }
        let fixed = replay_corrected(&initial, &history, &req).unwrap();
        for (a, b) in fixed.params().iter().zip(expected.params()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fixed, replay_corrected(&initial, &history, &req).unwrap());
    }

    #[test]
    fn replay_rejects_unordered_history_and_skips_empty_epochs() {
        let initial = model(1);
        let dim = initial.dim();
        let g = GradientVector::new(vec![1.0; dim]).unwrap();
        let a = record(0, vec![group(0, 0, [0, 1, 2])], vec![g.clone()]);
        let b = record(1, vec![group(1, 0, [0, 1, 2])], vec![g.clone()]);
        assert!(matches!(
            replay_corrected(
                &initial,
                &[b.clone(), a.clone()],
                &UnlearnRequest::default()
            ),
            Err(RecoveryError::Unordered(0))
        ));
        let all = UnlearnRequest::new([ClientId(0), ClientId(1), ClientId(2)]);
        assert_eq!(replay_corrected(&initial, &[a, b], &all).unwrap(), initial);
    }

    #[test]
    fn every_role_is_reconstructed_from_escrow() {
        let grp = group(3, 1, [4, 9, 2]);
        let grads: BTreeMap<_, _> = [
            (4, [0.5, -1.0, 2.0]),
            (9, [3.0, 0.0, -0.25]),
            (2, [-4.0, 1.5, 1.0]),
        ]
        .into_iter()
        .map(|(id, g)| (ClientId(id), v(&g)))
        .collect();
        let eps: BTreeMap<_, _> = grp
            .members
            .iter()
            .map(|&c| (c, negotiate_epsilon(c, 3, 77, 3, 5.0)))
            .collect();
        let out = run_group_round(&grp, &grads, &eps, 5).unwrap();
        let messages: BTreeMap<_, _> = out
            .escrow
            .iter()
            .map(|m| ((m.sender, m.receiver), m.vector.clone()))
            .collect();
        let ev = GroupEvidence {
            group: &grp,
            messages: &messages,
            epsilons: grp.members.map(|c| &eps[&c]),
            upload: &out.group_sum_masked,
        };
        for c in grp.members {
            let g = reconstruct_gradient(c, &ev).unwrap();
            let err = g.sub(&grads[&c]).unwrap().max_abs();
            assert!(err < 1e-12, "{c}: {err}");
        }
        assert!(matches!(
            reconstruct_gradient(ClientId(0), &ev),
            Err(RecoveryError::NotAMember { .. })
        ));
        let sum = server_recover(&out.group_sum_masked, grp.members.map(|c| &eps[&c])).unwrap();
        assert!(
            sum.sub(&GradientVector::sum(grads.values()).unwrap())
                .unwrap()
                .max_abs()
                < 1e-12
        );

        let mut partial = messages.clone();
        partial.remove(&(ClientId(9), ClientId(2)));
        let ev = GroupEvidence {
            messages: &partial,
            ..ev
        };
        assert!(reconstruct_gradient(ClientId(4), &ev).is_ok());
        assert!(matches!(
            reconstruct_gradient(ClientId(2), &ev),
            Err(RecoveryError::MissingMessage {
                what: "relay_sum",
                ..
            })
        ));
    }

    #[test]
    fn history_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.bin");
        let history = vec![
            record(
                0,
                vec![group(0, 0, [0, 1, 2]), group(0, 1, [5, 3, 4])],
                vec![v(&[0.1, 0.2]), v(&[-3.0, 1e-9])],
            ),
            EpochRecord::new(1, vec![], vec![], vec![], 2).unwrap(),
            record(
                2,
                vec![group(2, 0, [3, 1, 0])],
                vec![v(&[f64::MAX / 4.0, -0.0])],
            ),
        ];
        save_history(&path, 101, &history).unwrap();
        let (p, back) = load_history(&path).unwrap();
        assert_eq!(p, 101);
        assert_eq!(back, history);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_history(&path),
            Err(RecoveryError::Vault(VaultError::Format { .. }))
        ));
    }
}
