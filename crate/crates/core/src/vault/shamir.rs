use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{FieldElement, PrimeField, VaultError};
use crate::rng;

/// `(m, t)`: `m` clients, each secret split into `m - 1` shares, any `t` of
/// which recover it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub m: usize,
    pub t: usize,
}

impl ThresholdPolicy {
    pub fn new(m: usize, t: usize) -> Result<Self, VaultError> {
        if m < 2 || t < 1 || t > m - 1 {
            return Err(VaultError::InvalidPolicy { m, t });
        }
        Ok(Self { m, t })
    }

    pub fn share_count(&self) -> usize {
        self.m - 1
    }
}

/// `f(x) = S + a_1 x + ... + a_{t-1} x^{t-1}`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretPolynomial {
    coefficients: Vec<FieldElement>,
}

impl SecretPolynomial {
    /// Coefficients in ascending degree; the constant term is the secret.
    pub fn from_coefficients(coefficients: Vec<FieldElement>) -> Self {
        assert!(!coefficients.is_empty(), "polynomial needs a constant term");
        Self { coefficients }
    }

    /// Degree `t - 1` with uniformly random higher coefficients.
    pub fn random(secret: FieldElement, t: usize, seed: u64) -> Self {
        let field = secret.field();
        let mut r = rng::stream(seed, "vault/polynomial", &[]);
        let mut coefficients = Vec::with_capacity(t);
        coefficients.push(secret);
        coefficients.extend((1..t).map(|_| field.random(&mut r)));
        Self { coefficients }
    }

    pub fn secret(&self) -> FieldElement {
        self.coefficients[0]
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn evaluate(&self, x: FieldElement) -> FieldElement {
        self.coefficients
            .iter()
            .rev()
            .fold(x.field().zero(), |acc, &c| acc * x + c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShamirShare {
    pub x: FieldElement,
    pub y: FieldElement,
}

fn check_points(points: &[FieldElement], field: PrimeField) -> Result<(), VaultError> {
    let mut seen = BTreeSet::new();
    for x in points {
        if x.modulus() != field.modulus() {
            return Err(VaultError::FieldMismatch(x.modulus(), field.modulus()));
        }
        if x.is_zero() {
            return Err(VaultError::ZeroPoint);
        }
        if !seen.insert(x.value()) {
            return Err(VaultError::DuplicatePoint(x.value()));
        }
    }
    Ok(())
}

/// Shares `(r_j, f(r_j))` of a fresh random degree-`(t-1)` polynomial with
/// `f(0) = secret`, one per peer-chosen evaluation point.
pub fn split_secret(
    secret: FieldElement,
    policy: &ThresholdPolicy,
    eval_points: &[FieldElement],
    seed: u64,
) -> Result<Vec<ShamirShare>, VaultError> {
    ThresholdPolicy::new(policy.m, policy.t)?;
    if eval_points.len() != policy.share_count() {
        return Err(VaultError::PointCount {
            expected: policy.share_count(),
            actual: eval_points.len(),
        });
    }
    split_with_polynomial(
        &SecretPolynomial::random(secret, policy.t, seed),
        eval_points,
    )
}

/// Shares of a given polynomial.
pub fn split_with_polynomial(
    poly: &SecretPolynomial,
    eval_points: &[FieldElement],
) -> Result<Vec<ShamirShare>, VaultError> {
    check_points(eval_points, poly.secret().field())?;
    Ok(eval_points
        .iter()
        .map(|&x| ShamirShare {
            x,
            y: poly.evaluate(x),
        })
        .collect())
}

/// Lagrange interpolation at zero over the first `t` shares:
/// `S = sum_j y_j prod_{l != j} x_l / (x_l - x_j)`.
pub fn recover_secret(
    shares: &[ShamirShare],
    policy: &ThresholdPolicy,
) -> Result<FieldElement, VaultError> {
    if shares.len() < policy.t || policy.t == 0 {
        return Err(VaultError::InsufficientShares {
            needed: policy.t.max(1),
            got: shares.len(),
        });
    }
    let used = &shares[..policy.t];
    let field = used[0].x.field();
    let xs: Vec<FieldElement> = used.iter().map(|s| s.x).collect();
    check_points(&xs, field)?;
    for s in used {
        if s.y.modulus() != field.modulus() {
            return Err(VaultError::FieldMismatch(s.y.modulus(), field.modulus()));
        }
    }
    let mut secret = field.zero();
    for (j, sj) in used.iter().enumerate() {
        let mut num = field.one();
        let mut den = field.one();
        for (l, sl) in used.iter().enumerate() {
            if l != j {
                num = num * sl.x;
                den = den * (sl.x - sj.x);
            }
        }
        let basis = num
            * den
                .inverse()
                .expect("distinct points give nonzero denominators");
        secret = secret + sj.y * basis;
    }
    Ok(secret)
}
