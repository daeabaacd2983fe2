//! Scripted malicious-client behaviours and the closed-form gradient
//! inversion oracle used by the privacy checks.
//!
//! Attacks are applied before a client enters the group protocol: label
//! flipping corrupts the shard the client trains on, the two gradient attacks
//! rewrite the update it submits.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::{Dataset, LearningError};
use crate::rng;
use crate::vector::GradientVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("label flipping needs at least 2 classes")]
    SingleClass,
    #[error("random-update sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("gradient-ascent multiplier must be negative, got {0}")]
    NonNegativeMultiplier(f64),
    #[error(transparent)]
    Learning(#[from] LearningError),
}

/// What a client does to its data or update before entering the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryKind {
    Honest,
    /// Cyclic shift `y -> (y + 1) mod n_classes`, or a seeded random
    /// permutation of the classes when `permutation_seed` is set.
    LabelFlip {
        permutation_seed: Option<u64>,
    },
    /// Replace the update with i.i.d. `N(0, sigma^2)` noise.
    RandomUpdate {
        sigma: f64,
    },
    /// Upload `multiplier * g` with `multiplier < 0`.
    GradAscent {
        multiplier: f64,
    },
}

impl AdversaryKind {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        match *self {
            AdversaryKind::RandomUpdate { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(AdversaryError::NonPositiveSigma(sigma))
            }
            AdversaryKind::GradAscent { multiplier }
                if multiplier.is_nan() || multiplier >= 0.0 =>
            {
                Err(AdversaryError::NonNegativeMultiplier(multiplier))
            }
            _ => Ok(()),
        }
    }

    pub fn is_honest(&self) -> bool {
        matches!(self, AdversaryKind::Honest)
    }

    /// The shard this client actually trains on.
    pub fn corrupt_data(&self, shard: &Dataset) -> Result<Dataset, AdversaryError> {
        match *self {
            AdversaryKind::LabelFlip {
                permutation_seed: None,
            } => corrupt_labels(shard),
            AdversaryKind::LabelFlip {
                permutation_seed: Some(seed),
            } => corrupt_labels_permuted(shard, seed),
            _ => Ok(shard.clone()),
        }
    }

    /// The update this client actually submits.
    pub fn corrupt_update(
        &self,
        update: &GradientVector,
        seed: u64,
    ) -> Result<GradientVector, AdversaryError> {
        match *self {
            AdversaryKind::RandomUpdate { sigma } => corrupt_gradient_random(update, sigma, seed),
            AdversaryKind::GradAscent { multiplier } => corrupt_gradient_ascent(update, multiplier),
            _ => Ok(update.clone()),
        }
    }
}

/// Cyclic label shift; features untouched.
pub fn corrupt_labels(shard: &Dataset) -> Result<Dataset, AdversaryError> {
    let n = shard.n_classes();
    if n < 2 {
        return Err(AdversaryError::SingleClass);
    }
    Ok(shard.with_labels(shard.labels().iter().map(|y| (y + 1) % n).collect())?)
}

/// Relabels through a seeded permutation of the classes that moves every
/// class (a random cyclic order, so no label maps to itself).
pub fn corrupt_labels_permuted(shard: &Dataset, seed: u64) -> Result<Dataset, AdversaryError> {
    let n = shard.n_classes();
    if n < 2 {
        return Err(AdversaryError::SingleClass);
    }
    let mut cycle: Vec<usize> = (0..n).collect();
    cycle.shuffle(&mut rng::stream(seed, "adversary/label_permutation", &[]));
    let mut mapping = vec![0; n];
    for i in 0..n {
        mapping[cycle[i]] = cycle[(i + 1) % n];
    }
    Ok(shard.with_labels(shard.labels().iter().map(|&y| mapping[y]).collect())?)
}

/// Replacement (not additive) noise: the output ignores `g`'s values.
pub fn corrupt_gradient_random(
    g: &GradientVector,
    sigma: f64,
    seed: u64,
) -> Result<GradientVector, AdversaryError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AdversaryError::NonPositiveSigma(sigma));
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut r = rng::stream(seed, "adversary/random_update", &[]);
    Ok(
        GradientVector::new((0..g.dim()).map(|_| normal.sample(&mut r)).collect())
            .expect("gaussian samples are finite"),
    )
}

pub fn corrupt_gradient_ascent(
    g: &GradientVector,
    multiplier: f64,
) -> Result<GradientVector, AdversaryError> {
    if !(multiplier < 0.0 && multiplier.is_finite()) {
        return Err(AdversaryError::NonNegativeMultiplier(multiplier));
    }
    Ok(g.scale(multiplier))
}

/// Output of the inversion oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// `None` when the bias gradient is too small to divide by.
    pub reconstructed: Option<Vec<f64>>,
    /// L2 distance to the true sample, when both exist.
    pub residual: Option<f64>,
}

impl InversionResult {
    /// True when the attack recovered `truth` to within `fraction * ||truth||`.
    pub fn succeeded_within(&self, truth: &[f64], fraction: f64) -> bool {
        let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.residual.is_some_and(|r| r <= fraction * norm)
    }
}

/// Below this bias gradient the division is treated as degenerate.
pub const INVERSION_EPS: f64 = 1e-9;

/// Closed-form inversion for a single-sample binary logistic step.
///
/// With `g_w = (sigmoid(z) - y) x` and `g_b = sigmoid(z) - y`, the sample is
/// `x = g_w / g_b`.
pub fn invert_linear_gradient(g_w: &[f64], g_b: f64, truth: Option<&[f64]>) -> InversionResult {
    if g_b.abs() <= INVERSION_EPS || !g_b.is_finite() {
        return InversionResult {
            reconstructed: None,
            residual: None,
        };
    }
    let x: Vec<f64> = g_w.iter().map(|w| w / g_b).collect();
    let residual = truth.map(|t| {
        x.iter()
            .zip(t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    });
    InversionResult {
        reconstructed: Some(x),
        residual,
    }
}

/// Runs the oracle on a vector laid out as `[g_w..., g_b]`, the layout of a
/// binary logistic gradient (and of any protocol message carrying one).
pub fn invert_flat(message: &GradientVector, truth: Option<&[f64]>) -> InversionResult {
    let (g_w, g_b) = message.values().split_at(message.dim() - 1);
    invert_linear_gradient(g_w, g_b[0], truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new((0..n).map(|i| i as f64).collect(), 1, labels, classes).unwrap()
    }

    #[test]
    fn cyclic_flip() {
        let d = labelled(vec![0, 1, 2], 3);
        let flipped = corrupt_labels(&d).unwrap();
        assert_eq!(flipped.labels(), &[1, 2, 0]);
        assert_eq!(flipped.features(), d.features());
        let mut cur = d.clone();
        for _ in 0..3 {
            cur = corrupt_labels(&cur).unwrap();
        }
        assert_eq!(cur, d);
        assert_eq!(
            corrupt_labels(&labelled(vec![0, 0], 1)),
            Err(AdversaryError::SingleClass)
        );
    }

    #[test]
    fn flip_histogram_is_cyclic_permutation() {
        let d = labelled(vec![0, 0, 0, 1, 2, 2, 3, 3, 3, 3], 4);
        let before = d.class_histogram();
        let after = corrupt_labels(&d).unwrap().class_histogram();
        for c in 0..4 {
            assert_eq!(after[(c + 1) % 4], before[c]);
        }
    }

    #[test]
    fn permuted_flip_moves_every_label() {
        let d = labelled((0..50).map(|i| i % 5).collect(), 5);
        let flipped = corrupt_labels_permuted(&d, 3).unwrap();
        assert!(d.labels().iter().zip(flipped.labels()).all(|(a, b)| a != b));
        let mut h = flipped.class_histogram();
        h.sort();
        assert_eq!(h, vec![10; 5]);
    }

    #[test]
    fn random_update_is_replacement_and_seeded() {
        let a = GradientVector::new(vec![1.0; 16]).unwrap();
        let b = GradientVector::new(vec![-7.0; 16]).unwrap();
        let ra = corrupt_gradient_random(&a, 1.0, 5).unwrap();
        assert_eq!(ra, corrupt_gradient_random(&b, 1.0, 5).unwrap());
        assert_eq!(ra, corrupt_gradient_random(&a, 1.0, 5).unwrap());
        assert_ne!(ra, corrupt_gradient_random(&a, 1.0, 6).unwrap());
        assert!(corrupt_gradient_random(&a, 0.0, 5).is_err());
    }

    #[test]
    fn random_update_mean_is_centred() {
        let sigma = 2.0;
        let n = 100_000;
        let out = corrupt_gradient_random(&GradientVector::zeros(n), sigma, 12).unwrap();
        let mean = out.values().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn gradient_ascent() {
        let g = GradientVector::new(vec![1.0, -2.0]).unwrap();
        let out = corrupt_gradient_ascent(&g, -1.0).unwrap();
        assert_eq!(out.values(), &[-1.0, 2.0]);
        assert_eq!(corrupt_gradient_ascent(&out, -1.0).unwrap(), g);
        let scaled = corrupt_gradient_ascent(&g, -3.0).unwrap();
        assert!((scaled.norm() - 3.0 * g.norm()).abs() < 1e-12);
        assert!(corrupt_gradient_ascent(&g, 0.0).is_err());
        assert!(corrupt_gradient_ascent(&g, 2.0).is_err());
    }

    #[test]
    fn honest_is_identity() {
        let d = labelled(vec![0, 1, 1], 2);
        let g = GradientVector::new(vec![0.3, -0.1]).unwrap();
        assert_eq!(AdversaryKind::Honest.corrupt_data(&d).unwrap(), d);
        assert_eq!(AdversaryKind::Honest.corrupt_update(&g, 1).unwrap(), g);
    }

    #[test]
    fn validation() {
        assert!(AdversaryKind::RandomUpdate { sigma: -1.0 }
            .validate()
            .is_err());
        assert!(AdversaryKind::GradAscent { multiplier: 0.5 }
            .validate()
            .is_err());
        assert!(AdversaryKind::GradAscent { multiplier: -0.5 }
            .validate()
            .is_ok());
    }

    #[test]
    fn inversion_examples() {
        let r = invert_linear_gradient(&[0.2, -0.4], 0.2, Some(&[1.0, -2.0]));
        let x = r.reconstructed.clone().unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] + 2.0).abs() < 1e-15);
        assert!(r.residual.unwrap() < 1e-12);
        let fail = invert_linear_gradient(&[0.2, -0.4], 0.0, Some(&[1.0, -2.0]));
        assert_eq!(
            fail,
            InversionResult {
                reconstructed: None,
                residual: None
            }
        );
        assert!(!fail.succeeded_within(&[1.0, -2.0], 0.1));
    }
}
