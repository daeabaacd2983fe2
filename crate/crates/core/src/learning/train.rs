use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, LearningError, Model};
use crate::rng;
use crate::vector::GradientVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), LearningError> {
        if self.epochs == 0 {
            return Err(LearningError::InvalidTraining(
                "local epochs must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(LearningError::InvalidTraining(
                "batch size must be >= 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LearningError::InvalidTraining(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Plain mini-batch SGD on `shard`, starting from `model`. Returns the
/// cumulative parameter delta of the whole local phase; `model` itself is not
/// touched. Batch order is reshuffled every local epoch from `seed`.
pub fn local_train(
    model: &Model,
    shard: &Dataset,
    params: &TrainParams,
    seed: u64,
) -> Result<GradientVector, LearningError> {
    params.validate()?;
    if shard.n_features() != model.n_features() {
        return Err(LearningError::FeatureMismatch {
            expected: model.n_features(),
            actual: shard.n_features(),
        });
    }
    let mut working = model.clone();
    let mut grad = vec![0.0; model.dim()];
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for epoch in 0..params.epochs {
        let mut r = rng::stream(seed, "local_train/shuffle", &[epoch as u64]);
        order.shuffle(&mut r);
        for (batch, rows) in order.chunks(params.batch_size).enumerate() {
            let loss = working.loss_and_grad(shard, rows, &mut grad);
            if !loss.is_finite() {
                return Err(LearningError::NonFiniteLoss { epoch, batch });
            }
            working
                .params_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= params.lr * g);
            if let Some(bad) = working.params().iter().position(|p| !p.is_finite()) {
                log::warn!("parameter {bad} diverged at local epoch {epoch}, batch {batch}");
                return Err(LearningError::NonFiniteLoss { epoch, batch });
            }
        }
    }
    working.delta_from(model)
}
