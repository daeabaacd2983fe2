use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ScenarioConfig};
use super::metrics::{EpochMetrics, RunMetrics, TimingLog, Timings, SCHEMA_VERSION};
use super::{SimError, StepError};
use crate::detector::{probe_and_apply, EvaluationLedger};
use crate::learning::{
    load_small_image, local_train, partition_dataset, BlobGenerator, Dataset, Model,
};
use crate::protocol::{
    form_groups, form_groups_scattered, negotiate_epsilon, run_group_round, server_recover,
    ClientId, Group, GroupRoundOutput, PerturbationVector,
};
use crate::recovery::{
    reconstruct_gradient, replay_corrected, save_history, EpochRecord, GroupEvidence,
    RecoveryError, UnlearnRequest,
};
use crate::rng;
use crate::vault::{
    encrypt_record, quorum_decrypt, FieldElement, PrimeField, RecordStore, ShareBook,
    ShareSubmission, ThresholdPolicy,
};
use crate::vector::GradientVector;

pub const ESCROW_FILE: &str = "escrow.bin";
pub const HISTORY_FILE: &str = "history.bin";
pub const SHARES_FILE: &str = "shares.json";

/// Which of the paired runs to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Every client honest, defence on.
    NoAttack,
    /// Adversaries active, every group aggregated, nobody evicted.
    Attacked,
    /// Adversaries active, scoring, eviction and unlearning on.
    Defended,
    /// Malicious clients never participate; plain aggregation.
    CleanRetrain,
}

impl RunMode {
    fn adversaries_act(self) -> bool {
        matches!(self, RunMode::Attacked | RunMode::Defended)
    }

    fn defended(self) -> bool {
        matches!(self, RunMode::NoAttack | RunMode::Defended)
    }
}

/// Inputs shared by every paired run.
#[derive(Debug, Clone)]
pub struct Environment {
    pub config: ScenarioConfig,
    pub shards: Vec<Dataset>,
    pub validation: Dataset,
    pub test: Dataset,
    pub malicious: BTreeSet<ClientId>,
    pub initial: Model,
}

fn seed_for(config: &ScenarioConfig, domain: &str, parts: &[u64]) -> u64 {
    rng::derive_seed(config.seed, domain, parts)
}

impl Environment {
    pub fn build(config: &ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let setup = |e: crate::learning::LearningError| SimError::Setup(e.into());
        let m = config.num_client;
        let (train, validation, test) = match &config.dataset {
            DatasetSpec::Blobs { .. } => {
                let spec = config.blob_spec().expect("blob dataset");
                let gen = BlobGenerator::new(spec, seed_for(config, "data/centres", &[]))
                    .map_err(setup)?;
                (
                    gen.sample(
                        m * config.samples_per_client,
                        seed_for(config, "data/train", &[]),
                    )
                    .map_err(setup)?,
                    gen.sample(
                        config.validation_size,
                        seed_for(config, "data/validation", &[]),
                    )
                    .map_err(setup)?,
                    gen.sample(config.test_size, seed_for(config, "data/test", &[]))
                        .map_err(setup)?,
                )
            }
            DatasetSpec::File { path } => {
                let all = load_small_image(path).map_err(setup)?;
                let (v, t) = (config.validation_size, config.test_size);
                if all.len() < v + t + m {
                    return Err(SimError::Config(format!(
                        "{} has {} samples; need validation {v} + test {t} + at least {m} for training",
                        path.display(),
                        all.len()
                    )));
                }
                let mut order: Vec<usize> = (0..all.len()).collect();
                order.shuffle(&mut rng::stream(config.seed, "data/file_split", &[]));
                (
                    all.select(&order[v + t..]).map_err(setup)?,
                    all.select(&order[..v]).map_err(setup)?,
                    all.select(&order[v..v + t]).map_err(setup)?,
                )
            }
        };
        let shards = partition_dataset(
            &train,
            &config.partition_spec(seed_for(config, "data/partition", &[])),
        )
        .map_err(setup)?;
        let mut ids: Vec<ClientId> = (0..m as u32).map(ClientId).collect();
        ids.shuffle(&mut rng::stream(config.seed, "adversary/assign", &[]));
        let malicious = ids.into_iter().take(config.malicious_count()).collect();
        let initial = Model::new(
            config.model,
            train.n_features(),
            train.n_classes(),
            seed_for(config, "model/init", &[]),
        )
        .map_err(setup)?;
        Ok(Self {
            config: config.clone(),
            shards,
            validation,
            test,
            malicious,
            initial,
        })
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> {
        (0..self.config.num_client as u32).map(ClientId)
    }
}

/// The share file written for the offline recovery drill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareDrillFile {
    pub m: usize,
    pub t: usize,
    pub prime: u64,
    pub submissions: Vec<ShareSubmission>,
}

impl ShareDrillFile {
    pub fn policy(&self) -> Result<ThresholdPolicy, SimError> {
        ThresholdPolicy::new(self.m, self.t).map_err(|e| SimError::Config(e.to_string()))
    }
}

struct Vault {
    secrets: BTreeMap<ClientId, FieldElement>,
    book: ShareBook,
    store: RecordStore,
    nonce_seed: u64,
}

impl Vault {
    fn setup(
        env: &Environment,
        persist: Option<&Path>,
        timings: &mut TimingLog,
    ) -> Result<Self, StepError> {
        let config = &env.config;
        let field = PrimeField::new(config.shamir.prime)?;
        let policy = config.shamir_policy().expect("validated");
        let mut book = ShareBook::new(policy, field);
        let mut secrets = BTreeMap::new();
        let clients: Vec<ClientId> = env.clients().collect();
        let share_seed = seed_for(config, "vault/shares", &[]);
        for &c in &clients {
            let secret = field.random(&mut rng::stream(
                config.seed,
                "vault/secret",
                &[u64::from(c.0)],
            ));
            let peers: Vec<ClientId> = clients.iter().copied().filter(|&p| p != c).collect();
            let t0 = Instant::now();
            book.distribute(c, secret, &peers, share_seed)?;
            timings.gks.push(t0.elapsed());
            secrets.insert(c, secret);
        }
        let store = match persist {
            Some(dir) => RecordStore::create(&dir.join(ESCROW_FILE), field.modulus())?,
            None => RecordStore::in_memory(field.modulus()),
        };
        Ok(Self {
            secrets,
            book,
            store,
            nonce_seed: seed_for(config, "vault/nonce", &[]),
        })
    }

    fn escrow(
        &mut self,
        outputs: &[(Group, GroupRoundOutput)],
        timings: &mut TimingLog,
    ) -> Result<(), StepError> {
        let sealed: Vec<Vec<_>> = outputs
            .par_iter()
            .map(|(group, out)| {
                out.escrow
                    .iter()
                    .map(|msg| {
                        let key = crate::vault::RecordKey {
                            owner: msg.receiver,
                            epoch: group.epoch,
                            group: group.index,
                            sender: msg.sender,
                        };
                        let t0 = Instant::now();
                        let record = encrypt_record(
                            &msg.vector,
                            self.secrets[&msg.receiver],
                            key,
                            self.nonce_seed,
                        );
                        (record, t0.elapsed())
                    })
                    .collect()
            })
            .collect();
        for (record, took) in sealed.into_iter().flatten() {
            timings.enc.push(took);
            self.store.store_record(record)?;
        }
        Ok(())
    }
}

/// Result of one run.
#[derive(Debug)]
pub struct RunOutcome {
    pub mode: RunMode,
    pub final_model: Model,
    pub epochs: Vec<EpochMetrics>,
    pub ledger: Option<EvaluationLedger>,
    pub history: Vec<EpochRecord>,
    pub request: UnlearnRequest,
    pub(crate) timings: TimingLog,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.acc)
    }

    pub fn evicted(&self) -> BTreeMap<ClientId, u32> {
        self.ledger
            .as_ref()
            .map(|l| l.evicted().clone())
            .unwrap_or_default()
    }
}

fn epsilons(
    env: &Environment,
    clients: &[ClientId],
    epoch: u32,
    dim: usize,
) -> BTreeMap<ClientId, PerturbationVector> {
    clients
        .iter()
        .map(|&c| {
            let key = seed_for(&env.config, "protocol/epsilon_key", &[u64::from(c.0)]);
            (
                c,
                negotiate_epsilon(c, epoch, key, dim, env.config.epsilon_amplitude),
            )
        })
        .collect()
}

struct Unlearner {
    request: UnlearnRequest,
}

impl Unlearner {
    fn new(env: &Environment) -> Self {
        let weights = env
            .config
            .unlearn_weights
            .iter()
            .map(|(&c, &w)| (ClientId(c), w))
            .collect();
        Self {
            request: UnlearnRequest {
                weights,
                ..UnlearnRequest::default()
            },
        }
    }

    /// Opens the target's escrow with the remaining clients' shares and
    /// rebuilds its gradient for every epoch where it was aggregated.
    #[allow(clippy::too_many_arguments)]
    fn add_target(
        &mut self,
        env: &Environment,
        vault: &Vault,
        history: &[EpochRecord],
        target: ClientId,
        evicted: &BTreeMap<ClientId, u32>,
        epoch: u32,
        timings: &mut TimingLog,
    ) -> Result<(), StepError> {
        let providers: Vec<ClientId> = env
            .clients()
            .filter(|c| *c != target && !evicted.contains_key(c))
            .collect();
        let submissions = vault.book.submissions(&providers, env.clients());
        let t0 = Instant::now();
        let report = quorum_decrypt(
            &vault.store,
            target,
            (0, epoch),
            &submissions,
            &vault.book.policy(),
        )?;
        timings.dec.push(t0.elapsed());
        if !report.is_complete() {
            log::warn!(
                "quorum for {target} blocked on owners {:?} in epochs {:?}",
                report.blocked_owners,
                report.blocked_epochs
            );
        }
        let mut by_group: BTreeMap<(u32, u32), BTreeMap<(ClientId, ClientId), GradientVector>> =
            BTreeMap::new();
        for msg in report.messages {
            by_group
                .entry((msg.key.epoch, msg.key.group))
                .or_default()
                .insert((msg.key.sender, msg.key.owner), msg.vector);
        }
        let empty = BTreeMap::new();
        for record in history {
            let Some((i, group)) = record
                .groups
                .iter()
                .enumerate()
                .find(|(_, g)| g.contains(target))
            else {
                continue;
            };
            if self.request.gradients.contains_key(&(target, record.epoch)) {
                continue;
            }
            let eps = epsilons(env, &group.members, record.epoch, record.dim());
            let evidence = GroupEvidence {
                group,
                messages: by_group.get(&(record.epoch, group.index)).unwrap_or(&empty),
                epsilons: group.members.map(|c| &eps[&c]),
                upload: &record.uploads[i],
            };
            match reconstruct_gradient(target, &evidence) {
                Ok(g) => {
                    self.request.gradients.insert((target, record.epoch), g);
                }
                Err(RecoveryError::MissingMessage { .. }) => {
                    log::warn!(
                        "dropping group {} of epoch {}: evidence for {target} incomplete",
                        group.index,
                        record.epoch
                    );
                    self.request.dropped.insert((record.epoch, group.index));
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.request.malicious.insert(target);
        Ok(())
    }
}

/// Runs one mode end to end. With `persist`, the escrow store, the update
/// history and the share drill file are written into that directory.
pub fn simulate(
    env: &Environment,
    mode: RunMode,
    persist: Option<&Path>,
) -> Result<RunOutcome, SimError> {
    let config = &env.config;
    let params = config.train_params();
    let defended = mode.defended();
    let adversary_on = mode.adversaries_act() && !config.adversary.is_honest();
    let mut timings = TimingLog::default();

    let corrupted: BTreeMap<ClientId, Dataset> = if adversary_on {
        env.malicious
            .iter()
            .map(|&c| Ok((c, config.adversary.corrupt_data(&env.shards[c.0 as usize])?)))
            .collect::<Result<_, StepError>>()
            .map_err(SimError::Setup)?
    } else {
        BTreeMap::new()
    };
    let clients: Vec<ClientId> = env.clients().collect();
    let mut ledger =
        EvaluationLedger::new(clients.iter().copied(), config.tau, config.eviction_bound())
            .map_err(|e| SimError::Setup(e.into()))?;
    let mut vault = if defended {
        Some(Vault::setup(env, persist, &mut timings).map_err(SimError::Setup)?)
    } else {
        None
    };
    let mut unlearner = Unlearner::new(env);
    let mut model = env.initial.clone();
    let dim = model.dim();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut epochs = Vec::new();
    let mut flagged: Vec<Group> = Vec::new();

    for epoch in 0..config.epoch_global {
        let step = |e: StepError| SimError::Epoch { epoch, source: e };
        let active: Vec<ClientId> = clients
            .iter()
            .copied()
            .filter(|c| !ledger.is_evicted(*c))
            .filter(|c| mode != RunMode::CleanRetrain || !env.malicious.contains(c))
            .collect();

        let t0 = Instant::now();
        let gradients: BTreeMap<ClientId, GradientVector> = active
            .par_iter()
            .map(|&c| -> Result<_, StepError> {
                let acting = adversary_on && env.malicious.contains(&c);
                let shard = if acting {
                    &corrupted[&c]
                } else {
                    &env.shards[c.0 as usize]
                };
                let parts = [u64::from(c.0), u64::from(epoch)];
                let delta = local_train(&model, shard, &params, seed_for(config, "train", &parts))?;
                let g = if acting {
                    config
                        .adversary
                        .corrupt_update(&delta, seed_for(config, "adversary/update", &parts))?
                } else {
                    delta
                };
                Ok((c, g))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(step)?
            .into_iter()
            .collect();
        timings.add_phase("train", t0.elapsed());

        let t0 = Instant::now();
        let group_seed = seed_for(config, "protocol/groups", &[]);
        let grouping = if config.scatter_groups && defended {
            form_groups_scattered(&active, epoch, group_seed, &flagged)
        } else {
            form_groups(&active, epoch, group_seed)
        };
        let eps = epsilons(env, &active, epoch, dim);
        let outputs: Vec<(Group, GroupRoundOutput)> = grouping
            .groups
            .par_iter()
            .map(|g| {
                let seed = seed_for(
                    config,
                    "protocol/split",
                    &[u64::from(epoch), u64::from(g.index)],
                );
                run_group_round(g, &gradients, &eps, seed).map(|out| (*g, out))
            })
            .collect::<Result<_, _>>()
            .map_err(|e| step(e.into()))?;
        let sums: Vec<GradientVector> = outputs
            .iter()
            .map(|(g, out)| server_recover(&out.group_sum_masked, g.members.map(|c| &eps[&c])))
            .collect::<Result<_, _>>()
            .map_err(|e| step(e.into()))?;
        timings.add_phase("protocol", t0.elapsed());

        if let Some(v) = vault.as_mut() {
            let t0 = Instant::now();
            v.escrow(&outputs, &mut timings).map_err(step)?;
            timings.add_phase("escrow", t0.elapsed());
        }

        let t0 = Instant::now();
        let mut accepted = vec![true; outputs.len()];
        if defended {
            let mut probe = model.clone();
            for (i, ((group, _), sum)) in outputs.iter().zip(&sums).enumerate() {
                let (next, outcome) = probe_and_apply(&probe, sum, 3, &env.validation, config.tau)
                    .map_err(|e| step(e.into()))?;
                ledger
                    .record_scores(group, epoch, &outcome)
                    .map_err(|e| step(e.into()))?;
                accepted[i] = outcome.accepted;
                probe = next;
            }
        }
        timings.add_phase("probe", t0.elapsed());

        let pick = |i: usize| accepted[i];
        let record = EpochRecord::new(
            epoch,
            outputs
                .iter()
                .enumerate()
                .filter(|(i, _)| pick(*i))
                .map(|(_, (g, _))| *g)
                .collect(),
            sums.iter()
                .enumerate()
                .filter(|(i, _)| pick(*i))
                .map(|(_, s)| s.clone())
                .collect(),
            outputs
                .iter()
                .enumerate()
                .filter(|(i, _)| pick(*i))
                .map(|(_, (_, o))| o.group_sum_masked.clone())
                .collect(),
            dim,
        )
        .map_err(|e| step(e.into()))?;
        model = model
            .apply_update(&record.global_update)
            .map_err(|e| step(e.into()))?;
        history.push(record);
        flagged = outputs
            .iter()
            .enumerate()
            .filter(|(i, _)| !pick(*i))
            .map(|(_, (g, _))| *g)
            .collect();

        let mut newly = Vec::new();
        if let Some(v) = vault.as_ref() {
            newly = ledger.eviction_sweep(epoch);
            if !newly.is_empty() {
                let t0 = Instant::now();
                log::info!("epoch {epoch}: evicting {newly:?}");
                let evicted = ledger.evicted().clone();
                for &target in &newly {
                    unlearner
                        .add_target(env, v, &history, target, &evicted, epoch, &mut timings)
                        .map_err(step)?;
                }
                model = replay_corrected(&env.initial, &history, &unlearner.request)
                    .map_err(|e| step(e.into()))?;
                timings.add_phase("unlearn", t0.elapsed());
            }
        }

        let t0 = Instant::now();
        let acc = model.evaluate(&env.test).map_err(|e| step(e.into()))?;
        timings.add_phase("evaluate", t0.elapsed());
        let accepted_groups = accepted.iter().filter(|a| **a).count();
        let eligible = clients
            .iter()
            .filter(|c| !ledger.is_evicted(**c))
            .filter(|c| mode != RunMode::CleanRetrain || !env.malicious.contains(c))
            .count();
        log::debug!(
            "{mode:?} epoch {epoch}: acc {acc:.4}, {accepted_groups}/{} groups accepted",
            outputs.len()
        );
        epochs.push(EpochMetrics {
            epoch,
            acc,
            accepted_groups,
            rejected_groups: outputs.len() - accepted_groups,
            evictions: newly.len(),
            active_clients: eligible,
            excluded_clients: grouping.excluded.len(),
        });
    }

    if let (Some(dir), Some(v)) = (persist, vault.as_ref()) {
        let out = |e: String| SimError::Output(e);
        save_history(&dir.join(HISTORY_FILE), v.store.prime(), &history)
            .map_err(|e| out(e.to_string()))?;
        let policy = v.book.policy();
        let drill = ShareDrillFile {
            m: policy.m,
            t: policy.t,
            prime: v.store.prime(),
            submissions: v.book.all_submissions(),
        };
        std::fs::write(
            dir.join(SHARES_FILE),
            serde_json::to_string(&drill).expect("shares serialize"),
        )
        .map_err(|e| out(e.to_string()))?;
    }

    Ok(RunOutcome {
        mode,
        final_model: model,
        epochs,
        ledger: defended.then_some(ledger),
        history,
        request: unlearner.request,
        timings,
    })
}

/// The paired runs condensed into metrics, plus wall-clock timings of the
/// defended run.
pub fn run_scenario_timed(config: &ScenarioConfig) -> Result<(RunMetrics, Timings), SimError> {
    let env = Environment::build(config)?;
    let persist = config
        .output
        .dir
        .as_deref()
        .filter(|_| config.output.escrow_files);
    if let Some(dir) = persist {
        std::fs::create_dir_all(dir)
            .map_err(|e| SimError::Output(format!("{}: {e}", dir.display())))?;
    }
    let no_attack = simulate(&env, RunMode::NoAttack, None)?;
    let attacked = simulate(&env, RunMode::Attacked, None)?;
    let defended = simulate(&env, RunMode::Defended, persist)?;

    let evicted = defended.evicted();
    let malicious: Vec<ClientId> = env.malicious.iter().copied().collect();
    let detected: Vec<ClientId> = malicious
        .iter()
        .copied()
        .filter(|c| evicted.contains_key(c))
        .collect();
    let surviving: Vec<ClientId> = malicious
        .iter()
        .copied()
        .filter(|c| !evicted.contains_key(c))
        .collect();
    let false_positives: Vec<ClientId> = evicted
        .keys()
        .copied()
        .filter(|c| !env.malicious.contains(c))
        .collect();
    let honest = config.num_client - malicious.len();
    let acc_loc = if malicious.is_empty() {
        1.0
    } else {
        detected.len() as f64 / malicious.len() as f64
    };
    let rate_false = false_positives.len() as f64 / honest as f64;
    let epochs_to_last_eviction = if !surviving.is_empty() {
        config.epoch_global
    } else {
        malicious.iter().map(|c| evicted[c] + 1).max().unwrap_or(0)
    };
    let curve = |o: &RunOutcome| o.epochs.iter().map(|e| e.acc).collect();
    let metrics = RunMetrics {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        num_client: config.num_client,
        epochs: defended.epochs.clone(),
        acc_no_attack: no_attack.final_accuracy(),
        acc_attacked: attacked.final_accuracy(),
        acc_defended: defended.final_accuracy(),
        acc_loc,
        rate_false,
        malicious,
        detected,
        surviving,
        false_positives,
        eviction_epochs: evicted,
        epochs_to_last_eviction,
        ledger: defended
            .ledger
            .as_ref()
            .map(|l| l.totals().clone())
            .unwrap_or_default(),
        dropped_groups: defended.request.dropped.iter().copied().collect(),
        no_attack_curve: curve(&no_attack),
        attacked_curve: curve(&attacked),
    };
    Ok((metrics, defended.timings.finish()))
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<RunMetrics, SimError> {
    run_scenario_timed(config).map(|(m, _)| m)
}
