//! The grouped aggregation round.
//!
//! Clients are shuffled into triples `(A, B, C)` every epoch. Inside a group:
//!
//! ```text
//! A:  g_A = g_A^1 + g_A^2            (g_A^1 random)
//! A -> C:  g_A^1                     (tag share1)
//! A -> B:  g_A^2 + e_A               (tag masked_share2)
//! B -> C:  g_A^2 + e_A + g_B + e_B   (tag relay_sum)
//! C -> S:  g_A^1 + relay + g_C + e_C (tag group_sum)
//! ```
//!
//! The server knows every client's per-epoch mask `e_i` (derived from a key
//! negotiated at join time) and subtracts the three masks to obtain the exact
//! group sum. Every vector a participant receives is appended to its
//! [`ParticipantView`]; every client-to-client message is also returned for
//! escrow.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::vector::{GradientVector, VectorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("client {0} has no gradient for this round")]
    MissingGradient(ClientId),
    #[error("client {0} has no perturbation vector for this round")]
    MissingEpsilon(ClientId),
    #[error("perturbation vector belongs to client {found}, expected {expected}")]
    WrongEpsilonOwner { expected: ClientId, found: ClientId },
    #[error("cannot aggregate zero groups")]
    NoGroups,
    #[error("member count {member_count} is not 3 x {groups} groups")]
    MemberCount { member_count: usize, groups: usize },
    #[error(transparent)]
    Vector(#[from] VectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Three distinct clients with fixed roles for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Group {
    pub epoch: u32,
    /// Position of the group in the epoch's deterministic order.
    pub index: u32,
    /// `[splitter A, relay B, aggregator C]`
    pub members: [ClientId; 3],
}

impl Group {
    pub fn splitter(&self) -> ClientId {
        self.members[0]
    }

    pub fn relay(&self) -> ClientId {
        self.members[1]
    }

    pub fn aggregator(&self) -> ClientId {
        self.members[2]
    }

    pub fn contains(&self, id: ClientId) -> bool {
        self.members.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub groups: Vec<Group>,
    /// Active clients left over when the count is not a multiple of three.
    pub excluded: Vec<ClientId>,
}

fn shuffled(active: &[ClientId], epoch: u32, seed: u64) -> Vec<ClientId> {
    let mut order = active.to_vec();
    order.sort_unstable();
    order.dedup();
    order.shuffle(&mut rng::stream(
        seed,
        "protocol/grouping",
        &[u64::from(epoch)],
    ));
    order
}

/// Seeded shuffle of the active clients cut into consecutive triples; roles
/// follow position. The shuffle is keyed by the epoch so co-membership changes
/// from one epoch to the next.
pub fn form_groups(active: &[ClientId], epoch: u32, seed: u64) -> Grouping {
    let order = shuffled(active, epoch, seed);
    let full = order.len() / 3 * 3;
    let groups = order[..full]
        .chunks_exact(3)
        .enumerate()
        .map(|(i, c)| Group {
            epoch,
            index: i as u32,
            members: [c[0], c[1], c[2]],
        })
        .collect();
    Grouping {
        groups,
        excluded: order[full..].to_vec(),
    }
}

/// Like [`form_groups`], but places clients that shared a flagged group in
/// different triples. Former group-mates are pulled together in the shuffled
/// order and the sequence is dealt round-robin over the triples, so mates land
/// in distinct triples whenever there are at least three of them.
pub fn form_groups_scattered(
    active: &[ClientId],
    epoch: u32,
    seed: u64,
    flagged: &[Group],
) -> Grouping {
    let order = shuffled(active, epoch, seed);
    let n_groups = order.len() / 3;
    let full = n_groups * 3;
    let placed = &order[..full];
    let mut sequence: Vec<ClientId> = Vec::with_capacity(full);
    for &client in placed {
        if sequence.contains(&client) {
            continue;
        }
        sequence.push(client);
        for g in flagged.iter().filter(|g| g.contains(client)) {
            for &mate in &g.members {
                if placed.contains(&mate) && !sequence.contains(&mate) {
                    sequence.push(mate);
                }
            }
        }
    }
    let mut slots: Vec<Vec<ClientId>> = vec![Vec::with_capacity(3); n_groups];
    for (k, client) in sequence.into_iter().enumerate() {
        slots[k % n_groups].push(client);
    }
    let groups = slots
        .into_iter()
        .enumerate()
        .map(|(i, c)| Group {
            epoch,
            index: i as u32,
            members: [c[0], c[1], c[2]],
        })
        .collect();
    Grouping {
        groups,
        excluded: order[full..].to_vec(),
    }
}

/// Two additive shares of a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientShares {
    pub g1: GradientVector,
    pub g2: GradientVector,
}

/// `g1` is uniform in `[-s, s]` per coordinate with `s = max(1, ||g||_inf)`,
/// drawn independently of `g`'s values; `g2 = g - g1`.
pub fn split_gradient(g: &GradientVector, seed: u64) -> GradientShares {
    let s = g.max_abs().max(1.0);
    let u = Uniform::new_inclusive(-s, s);
    let mut r = rng::stream(seed, "protocol/split", &[]);
    let g1 = GradientVector::new((0..g.dim()).map(|_| u.sample(&mut r)).collect())
        .expect("uniform samples are finite");
    let g2 = g.sub(&g1).expect("same dimension");
    GradientShares { g1, g2 }
}

/// A client's mask for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationVector {
    pub owner: ClientId,
    pub epoch: u32,
    pub values: GradientVector,
}

/// Derives the client's per-epoch mask from the key it shares with the
/// server. The PRF is ChaCha20 keyed by SHA-256 of `(shared_seed, client,
/// epoch)`; client and server run this independently and get identical bits.
/// Entries are uniform in `[-amplitude, amplitude]`.
pub fn negotiate_epsilon(
    client: ClientId,
    epoch: u32,
    shared_seed: u64,
    dim: usize,
    amplitude: f64,
) -> PerturbationVector {
    let values = if amplitude == 0.0 {
        log::warn!("perturbation amplitude is 0: {client} is unmasked in epoch {epoch}");
        GradientVector::zeros(dim)
    } else {
        let u = Uniform::new_inclusive(-1.0, 1.0);
        let mut r = rng::stream(
            shared_seed,
            "protocol/epsilon",
            &[u64::from(client.0), u64::from(epoch)],
        );
        GradientVector::new((0..dim).map(|_| amplitude * u.sample(&mut r)).collect())
            .expect("finite amplitude")
    };
    PerturbationVector {
        owner: client,
        epoch,
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Share1,
    MaskedShare2,
    RelaySum,
    GroupSum,
}

impl ViewTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViewTag::Share1 => "share1",
            ViewTag::MaskedShare2 => "masked_share2",
            ViewTag::RelaySum => "relay_sum",
            ViewTag::GroupSum => "group_sum",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            ViewTag::Share1 => 1,
            ViewTag::MaskedShare2 => 2,
            ViewTag::RelaySum => 3,
            ViewTag::GroupSum => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observer {
    Client(ClientId),
    Server,
}

/// Append-only log of everything one participant received in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantView {
    pub observer: Observer,
    pub epoch: u32,
    observed: Vec<(ViewTag, GradientVector)>,
}

impl ParticipantView {
    pub fn new(observer: Observer, epoch: u32) -> Self {
        Self {
            observer,
            epoch,
            observed: Vec::new(),
        }
    }

    pub fn record(&mut self, tag: ViewTag, vector: GradientVector) {
        self.observed.push((tag, vector));
    }

    pub fn observed(&self) -> &[(ViewTag, GradientVector)] {
        &self.observed
    }

    /// Canonical bytes of the observations in receipt order; two views are
    /// indistinguishable exactly when these are equal.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (tag, v) in &self.observed {
            out.push(tag.code());
            out.extend((v.dim() as u32).to_le_bytes());
            out.extend(v.to_le_bytes());
        }
        out
    }
}

/// One client-to-client message, kept for escrow under the receiver's key.
#[derive(Debug, Clone, PartialEq)]
pub struct EscrowMessage {
    pub sender: ClientId,
    pub receiver: ClientId,
    pub tag: ViewTag,
    pub vector: GradientVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRoundOutput {
    pub group_sum_masked: GradientVector,
    /// Views of A, B, C and the server, in that order.
    pub views: Vec<ParticipantView>,
    pub escrow: Vec<EscrowMessage>,
}

fn lookup<T>(
    map: &BTreeMap<ClientId, T>,
    id: ClientId,
    missing: fn(ClientId) -> ProtocolError,
) -> Result<&T, ProtocolError> {
    map.get(&id).ok_or(missing(id))
}

/// Runs one group's exchange, splitting A's gradient with `seed`.
pub fn run_group_round(
    group: &Group,
    gradients: &BTreeMap<ClientId, GradientVector>,
    epsilons: &BTreeMap<ClientId, PerturbationVector>,
    seed: u64,
) -> Result<GroupRoundOutput, ProtocolError> {
    let g_a = lookup(gradients, group.splitter(), ProtocolError::MissingGradient)?;
    let shares = split_gradient(g_a, seed);
    run_group_round_with_shares(group, gradients, epsilons, &shares)
}

/// The exchange with an explicit split of A's gradient. `shares` must sum to
/// A's gradient; only `g1` and `g2` are used, so the caller controls exactly
/// what B and C observe.
pub fn run_group_round_with_shares(
    group: &Group,
    gradients: &BTreeMap<ClientId, GradientVector>,
    epsilons: &BTreeMap<ClientId, PerturbationVector>,
    shares: &GradientShares,
) -> Result<GroupRoundOutput, ProtocolError> {
    let [a, b, c] = group.members;
    let g_a = lookup(gradients, a, ProtocolError::MissingGradient)?;
    let g_b = lookup(gradients, b, ProtocolError::MissingGradient)?;
    let g_c = lookup(gradients, c, ProtocolError::MissingGradient)?;
    let mut eps = [a, b, c].map(|id| lookup(epsilons, id, ProtocolError::MissingEpsilon));
    for (id, e) in [a, b, c].iter().zip(eps.iter_mut()) {
        if let Ok(p) = e {
            if p.owner != *id {
                *e = Err(ProtocolError::WrongEpsilonOwner {
                    expected: *id,
                    found: p.owner,
                });
            }
        }
    }
    let [e_a, e_b, e_c] = eps;
    let (e_a, e_b, e_c) = (&e_a?.values, &e_b?.values, &e_c?.values);
    let dim = g_a.dim();
    for v in [g_b, g_c, e_a, e_b, e_c, &shares.g1, &shares.g2] {
        v.check_dim(dim)?;
    }

    let mut view_a = ParticipantView::new(Observer::Client(a), group.epoch);
    let mut view_b = ParticipantView::new(Observer::Client(b), group.epoch);
    let mut view_c = ParticipantView::new(Observer::Client(c), group.epoch);
    let mut view_s = ParticipantView::new(Observer::Server, group.epoch);
    let mut escrow = Vec::with_capacity(3);
    let mut send = |from: ClientId,
                    to: ClientId,
                    tag: ViewTag,
                    v: &GradientVector,
                    view: &mut ParticipantView| {
        view.record(tag, v.clone());
        escrow.push(EscrowMessage {
            sender: from,
            receiver: to,
            tag,
            vector: v.clone(),
        });
    };

    // A -> C: g_A^1
    send(a, c, ViewTag::Share1, &shares.g1, &mut view_c);
    // A -> B: g_A^2 + e_A
    let masked_share2 = shares.g2.add(e_a)?;
    send(a, b, ViewTag::MaskedShare2, &masked_share2, &mut view_b);
    // B -> C: g_A^2 + e_A + g_B + e_B
    let relay_sum = masked_share2.add(g_b)?.add(e_b)?;
    send(b, c, ViewTag::RelaySum, &relay_sum, &mut view_c);
    // C -> server: g_A^1 + relay + g_C + e_C
    let group_sum_masked = shares.g1.add(&relay_sum)?.add(g_c)?.add(e_c)?;
    view_s.record(ViewTag::GroupSum, group_sum_masked.clone());
    // A receives nothing in this exchange.
    let _ = &mut view_a;

    Ok(GroupRoundOutput {
        group_sum_masked,
        views: vec![view_a, view_b, view_c, view_s],
        escrow,
    })
}

/// Removes the three members' masks from the uploaded group sum.
pub fn server_recover(
    group_sum_masked: &GradientVector,
    epsilons: [&PerturbationVector; 3],
) -> Result<GradientVector, ProtocolError> {
    let mut out = group_sum_masked.clone();
    for e in epsilons {
        out.sub_assign(&e.values)?;
    }
    Ok(out)
}

/// Per-client mean of the recovered group sums.
pub fn aggregate_global(
    recovered: &[GradientVector],
    member_count: usize,
) -> Result<GradientVector, ProtocolError> {
    if recovered.is_empty() {
        return Err(ProtocolError::NoGroups);
    }
    if member_count != 3 * recovered.len() {
        return Err(ProtocolError::MemberCount {
            member_count,
            groups: recovered.len(),
        });
    }
    Ok(GradientVector::sum(recovered)?.scale(1.0 / member_count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u32) -> Vec<ClientId> {
        (0..n).map(ClientId).collect()
    }

    fn v(values: &[f64]) -> GradientVector {
        GradientVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn grouping_sizes() {
        let six = form_groups(&ids(6), 0, 1);
        assert_eq!((six.groups.len(), six.excluded.len()), (2, 0));
        let seven = form_groups(&ids(7), 0, 1);
        assert_eq!((seven.groups.len(), seven.excluded.len()), (2, 1));
        let two = form_groups(&ids(2), 0, 1);
        assert_eq!((two.groups.len(), two.excluded.len()), (0, 2));
        assert!(form_groups(&[], 0, 1).groups.is_empty());
    }

    #[test]
    fn grouping_is_seeded_and_varies_by_epoch() {
        let active = ids(30);
        assert_eq!(form_groups(&active, 4, 9), form_groups(&active, 4, 9));
        assert_ne!(form_groups(&active, 4, 9), form_groups(&active, 5, 9));
        let g = form_groups(&active, 4, 9);
        let mut seen: Vec<ClientId> = g.groups.iter().flat_map(|g| g.members).collect();
        seen.sort();
        assert_eq!(seen, active);
    }

    #[test]
    fn roles_rotate_evenly() {
        let active = ids(30);
        let mut counts = vec![[0u32; 3]; 30];
        let epochs = 600;
        for e in 0..epochs {
            for g in form_groups(&active, e, 3).groups {
                for (role, m) in g.members.iter().enumerate() {
                    counts[m.0 as usize][role] += 1;
                }
            }
        }
        for c in counts {
            for role in c {
                let share = f64::from(role) / f64::from(epochs);
                assert!((share - 1.0 / 3.0).abs() < 0.08, "{share}");
            }
        }
    }

    #[test]
    fn scattered_grouping_separates_flagged_members() {
        let active = ids(12);
        let flagged = form_groups(&active, 0, 5).groups;
        for epoch in 1..20 {
            let g = form_groups_scattered(&active, epoch, 5, &flagged);
            assert_eq!(g.groups.len(), 4);
            for group in &g.groups {
                for old in &flagged {
                    let overlap = group.members.iter().filter(|m| old.contains(**m)).count();
                    assert!(overlap <= 1, "epoch {epoch}: {group:?} vs {old:?}");
                }
            }
        }
    }

    #[test]
    fn split_reconstructs() {
        let zero = GradientVector::zeros(4);
        let s = split_gradient(&zero, 3);
        assert!(s.g1.add(&s.g2).unwrap().is_zero());
        let g = v(&[3.0, -1.0]);
        for seed in 0..100 {
            let s = split_gradient(&g, seed);
            let back = s.g1.add(&s.g2).unwrap();
            for (a, b) in back.values().iter().zip(g.values()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_ne!(s.g1, g);
            assert_ne!(s.g2, g);
            assert_ne!(s.g1, split_gradient(&g, seed + 1000).g1);
        }
    }

    #[test]
    fn epsilon_dual_derivation_and_freshness() {
        let client_side = negotiate_epsilon(ClientId(4), 7, 99, 16, 1.0);
        let server_side = negotiate_epsilon(ClientId(4), 7, 99, 16, 1.0);
        let bits = |p: &PerturbationVector| {
            p.values
                .values()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&client_side), bits(&server_side));
        for e in 0..100 {
            assert_ne!(
                negotiate_epsilon(ClientId(4), e, 99, 16, 1.0).values,
                negotiate_epsilon(ClientId(4), e + 1, 99, 16, 1.0).values
            );
        }
        assert!(negotiate_epsilon(ClientId(4), 7, 99, 16, 0.0)
            .values
            .is_zero());
        assert!(client_side.values.max_abs() <= 1.0);
    }

    fn setup(
        grads: [&[f64]; 3],
        eps: [&[f64]; 3],
    ) -> (
        Group,
        BTreeMap<ClientId, GradientVector>,
        BTreeMap<ClientId, PerturbationVector>,
    ) {
        let group = Group {
            epoch: 0,
            index: 0,
            members: [ClientId(0), ClientId(1), ClientId(2)],
        };
        let gradients = (0..3)
            .map(|i| (ClientId(i), v(grads[i as usize])))
            .collect();
        let epsilons = (0..3)
            .map(|i| {
                (
                    ClientId(i),
                    PerturbationVector {
                        owner: ClientId(i),
                        epoch: 0,
                        values: v(eps[i as usize]),
                    },
                )
            })
            .collect();
        (group, gradients, epsilons)
    }

    #[test]
    fn zero_round_is_zero() {
        let z: &[f64] = &[0.0, 0.0];
        let (g, gr, ep) = setup([z, z, z], [z, z, z]);
        assert!(run_group_round(&g, &gr, &ep, 1)
            .unwrap()
            .group_sum_masked
            .is_zero());
    }

    #[test]
    fn round_sums_and_recovers() {
        let (g, gr, ep) = setup(
            [&[0.3, -1.2, 4.0], &[2.5, 0.1, -0.7], &[-0.4, 0.9, 1.1]],
            [&[0.11, -0.5, 0.8], &[-0.9, 0.2, 0.33], &[0.6, 0.6, -0.1]],
        );
        let out = run_group_round(&g, &gr, &ep, 42).unwrap();
        let direct = GradientVector::sum(gr.values()).unwrap();
        let masks = GradientVector::sum(ep.values().map(|p| &p.values)).unwrap();
        let expected = direct.add(&masks).unwrap();
        for (a, b) in out.group_sum_masked.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        let recovered = server_recover(
            &out.group_sum_masked,
            [&ep[&ClientId(0)], &ep[&ClientId(1)], &ep[&ClientId(2)]],
        )
        .unwrap();
        for (a, b) in recovered.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-9);
        }

        // Aggregator sees exactly share1 then relay_sum, never a raw gradient.
        let c_view = &out.views[2];
        let tags: Vec<_> = c_view.observed().iter().map(|(t, _)| *t).collect();
        assert_eq!(tags, vec![ViewTag::Share1, ViewTag::RelaySum]);
        for (_, seen) in c_view.observed() {
            assert!(gr.values().all(|raw| raw != seen));
        }
        assert!(out.views[0].observed().is_empty());
        assert_eq!(out.views[1].observed().len(), 1);
        assert_eq!(out.views[3].observed()[0].0, ViewTag::GroupSum);

        let routes: Vec<_> = out
            .escrow
            .iter()
            .map(|m| (m.sender.0, m.receiver.0, m.tag))
            .collect();
        assert_eq!(
            routes,
            vec![
                (0, 2, ViewTag::Share1),
                (0, 1, ViewTag::MaskedShare2),
                (1, 2, ViewTag::RelaySum)
            ]
        );
    }

    #[test]
    fn wrong_mask_shifts_recovery_by_its_error() {
        let (g, gr, ep) = setup(
            [&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]],
            [&[0.5, 0.5], &[0.25, -0.25], &[1.0, 0.0]],
        );
        let out = run_group_round(&g, &gr, &ep, 0).unwrap();
        let mut wrong = ep[&ClientId(1)].clone();
        wrong.values = wrong.values.add(&v(&[0.125, -2.0])).unwrap();
        let good = server_recover(
            &out.group_sum_masked,
            [&ep[&ClientId(0)], &ep[&ClientId(1)], &ep[&ClientId(2)]],
        )
        .unwrap();
        let bad = server_recover(
            &out.group_sum_masked,
            [&ep[&ClientId(0)], &wrong, &ep[&ClientId(2)]],
        )
        .unwrap();
        let diff = good.sub(&bad).unwrap();
        assert!((diff.values()[0] - 0.125).abs() < 1e-12 && (diff.values()[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn round_errors() {
        let (g, mut gr, ep) = setup([&[1.0], &[1.0], &[1.0]], [&[0.0], &[0.0], &[0.0]]);
        let mut bad = gr.clone();
        bad.insert(ClientId(1), v(&[1.0, 2.0]));
        assert!(matches!(
            run_group_round(&g, &bad, &ep, 0),
            Err(ProtocolError::Vector(VectorError::DimensionMismatch { .. }))
        ));
        gr.remove(&ClientId(2));
        assert_eq!(
            run_group_round(&g, &gr, &ep, 0),
            Err(ProtocolError::MissingGradient(ClientId(2)))
        );
    }

    #[test]
    fn aggregation() {
        let out = aggregate_global(&[v(&[3.0, 6.0])], 3).unwrap();
        assert_eq!(out.values(), &[1.0, 2.0]);
        assert_eq!(aggregate_global(&[], 0), Err(ProtocolError::NoGroups));
        assert!(matches!(
            aggregate_global(&[v(&[1.0])], 4),
            Err(ProtocolError::MemberCount { .. })
        ));
    }
}
