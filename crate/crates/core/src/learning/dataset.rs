use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LearningError;
use crate::rng;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, LearningError> {
        if labels.is_empty() {
            return Err(LearningError::InvalidDataset(
                "dataset has no samples".into(),
            ));
        }
        if n_features == 0 || n_classes == 0 {
            return Err(LearningError::InvalidDataset(
                "n_features and n_classes must be positive".into(),
            ));
        }
        if features.len() != labels.len() * n_features {
            return Err(LearningError::InvalidDataset(format!(
                "{} feature values for {} samples of width {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(LearningError::InvalidDataset(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(LearningError::InvalidDataset(format!(
                "non-finite feature {v}"
            )));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.n_classes];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }

    /// Samples at `indices`, in that order. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self, LearningError> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.n_features, labels, self.n_classes)
    }

    /// Same features, new labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self, LearningError> {
        Self::new(
            self.features.clone(),
            self.n_features,
            labels,
            self.n_classes,
        )
    }
}

/// Parameters of the synthetic Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_features: usize,
    pub n_classes: usize,
    /// Standard deviation of class-centre coordinates.
    pub separation: f64,
    /// Standard deviation of per-sample noise around the centre.
    pub noise: f64,
}

/// Gaussian blobs with fixed class centres; different sample seeds draw
/// disjoint-but-identically-distributed sets (client data, server validation,
/// test data).
#[derive(Debug, Clone)]
pub struct BlobGenerator {
    spec: BlobSpec,
    centres: Vec<f64>,
}

impl BlobGenerator {
    pub fn new(spec: BlobSpec, seed: u64) -> Result<Self, LearningError> {
        if spec.n_features == 0 || spec.n_classes < 2 {
            return Err(LearningError::InvalidDataset(
                "blobs need n_features >= 1 and n_classes >= 2".into(),
            ));
        }
        if !(spec.separation > 0.0 && spec.noise > 0.0) {
            return Err(LearningError::InvalidDataset(
                "blob separation and noise must be positive".into(),
            ));
        }
        let mut r = rng::stream(seed, "blobs/centres", &[]);
        let normal = Normal::new(0.0, spec.separation).expect("positive std");
        let centres = (0..spec.n_features * spec.n_classes)
            .map(|_| normal.sample(&mut r))
            .collect();
        Ok(Self { spec, centres })
    }

    pub fn spec(&self) -> &BlobSpec {
        &self.spec
    }

    /// `n` samples with labels cycling through the classes, so every class is
    /// represented whenever `n >= n_classes`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset, LearningError> {
        let d = self.spec.n_features;
        let mut r = rng::stream(seed, "blobs/samples", &[]);
        let noise = Normal::new(0.0, self.spec.noise).expect("positive std");
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % self.spec.n_classes;
            let centre = &self.centres[y * d..(y + 1) * d];
            features.extend(centre.iter().map(|c| c + noise.sample(&mut r)));
            labels.push(y);
        }
        // Decouple label order from position.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        Dataset::new(features, d, labels, self.spec.n_classes)?.select(&order)
    }
}

/// Loads the small-image text format: a header line
/// `n_samples n_features n_classes`, then one sample per line with
/// `n_features` decimal reals followed by an integer label.
pub fn load_small_image(path: &Path) -> Result<Dataset, LearningError> {
    let fail = |reason: String| LearningError::DatasetFile {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| fail("missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| fail(format!("bad header: {e}")))?;
    let [n_samples, n_features, n_classes] = dims[..] else {
        return Err(fail(format!("header needs 3 integers, got {}", dims.len())));
    };
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for (lineno, line) in lines.enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != n_features + 1 {
            return Err(fail(format!(
                "sample {lineno}: expected {} fields, found {}",
                n_features + 1,
                tokens.len()
            )));
        }
        for t in &tokens[..n_features] {
            features.push(
                t.parse::<f64>()
                    .map_err(|e| fail(format!("sample {lineno}: {e}")))?,
            );
        }
        labels.push(
            tokens[n_features]
                .parse::<usize>()
                .map_err(|e| fail(format!("sample {lineno}: label: {e}")))?,
        );
    }
    if labels.len() != n_samples {
        return Err(fail(format!(
            "header declares {n_samples} samples, file has {}",
            labels.len()
        )));
    }
    Dataset::new(features, n_features, labels, n_classes)
}
