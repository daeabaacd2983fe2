use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, LearningError};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    /// Fraction of every shard dealt from the shared uniform pool.
    pub rate_iid: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(0.0..=1.0).contains(&self.rate_iid) {
            return Err(LearningError::InvalidPartition(format!(
                "rate_iid {} outside [0, 1]",
                self.rate_iid
            )));
        }
        if self.n_clients < 3 {
            return Err(LearningError::InvalidPartition(format!(
                "need at least 3 clients, got {}",
                self.n_clients
            )));
        }
        Ok(())
    }
}

/// Two-pool non-IID partition.
///
/// Shard `i` has a dominant class (a seeded permutation of the classes,
/// cycled over shards). It first takes `round((1 - rate_iid) * size)` samples
/// from its dominant class; every sample not taken that way goes into a single
/// shuffled pool which is dealt out to fill the shards to their sizes. When a
/// dominant class runs dry the shortfall is filled from the pool.
///
/// Every input sample lands in exactly one shard.
pub fn partition_dataset(
    dataset: &Dataset,
    spec: &PartitionSpec,
) -> Result<Vec<Dataset>, LearningError> {
    spec.validate()?;
    let n = dataset.len();
    let m = spec.n_clients;
    if m > n {
        return Err(LearningError::InvalidPartition(format!(
            "{m} clients but only {n} samples"
        )));
    }
    let mut r = rng::stream(spec.seed, "partition", &[]);

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut r);
    }
    let mut class_order: Vec<usize> = (0..dataset.n_classes()).collect();
    class_order.shuffle(&mut r);

    let sizes: Vec<usize> = (0..m).map(|i| n / m + usize::from(i < n % m)).collect();
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(m);
    for (i, &size) in sizes.iter().enumerate() {
        let dominant = class_order[i % class_order.len()];
        let wanted = ((1.0 - spec.rate_iid) * size as f64).round() as usize;
        let pool = &mut pools[dominant];
        let take = wanted.min(pool.len());
        shards.push(pool.split_off(pool.len() - take));
    }

    let mut uniform: Vec<usize> = pools.into_iter().flatten().collect();
    uniform.sort_unstable();
    uniform.shuffle(&mut r);
    let mut next = uniform.into_iter();
    for (shard, &size) in shards.iter_mut().zip(&sizes) {
        while shard.len() < size {
            shard.push(next.next().expect("pool covers remaining capacity"));
        }
    }
    debug_assert!(next.next().is_none());

    shards.iter().map(|idx| dataset.select(idx)).collect()
}
