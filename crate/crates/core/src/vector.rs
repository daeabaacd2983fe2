//! Fixed-dimension real vectors exchanged by the protocol.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite entry {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("vectors must have dimension >= 1")]
    Empty,
}

/// A flat, finite, real-valued vector. Gradients, shares, masks and group sums
/// all use this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VectorError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), VectorError> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(VectorError::DimensionMismatch {
                expected,
                actual: self.dim(),
            })
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, VectorError> {
        other.check_dim(self.dim())?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, VectorError> {
        other.check_dim(self.dim())?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), VectorError> {
        other.check_dim(self.dim())?;
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Self) -> Result<(), VectorError> {
        other.check_dim(self.dim())?;
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a -= b);
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Canonical little-endian encoding of the entries.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self, VectorError> {
        if !bytes.len().is_multiple_of(8) {
            return Err(VectorError::DimensionMismatch {
                expected: bytes.len() / 8 * 8,
                actual: bytes.len(),
            });
        }
        Self::new(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        )
    }

    /// Sum of a non-empty list of equal-dimension vectors.
    pub fn sum<'a, I>(vectors: I) -> Result<Self, VectorError>
    where
        I: IntoIterator<Item = &'a GradientVector>,
    {
        let mut iter = vectors.into_iter();
        let mut acc = iter.next().ok_or(VectorError::Empty)?.clone();
        for v in iter {
            acc.add_assign(v)?;
        }
        Ok(acc)
    }
}

impl TryFrom<Vec<f64>> for GradientVector {
    type Error = VectorError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<GradientVector> for Vec<f64> {
    fn from(v: GradientVector) -> Self {
        v.0
    }
}
