use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VaultError;

/// `2^61 - 1`, a Mersenne prime.
pub const DEFAULT_PRIME: u64 = (1 << 61) - 1;

/// Arithmetic modulo a prime below `2^63`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrimeField {
    p: u64,
}

impl PrimeField {
    /// Checks primality once (deterministic Miller-Rabin for 64-bit inputs).
    pub fn new(p: u64) -> Result<Self, VaultError> {
        if p >= 1 << 63 || !is_prime(p) {
            return Err(VaultError::NotPrime(p));
        }
        Ok(Self { p })
    }

    pub fn modulus(&self) -> u64 {
        self.p
    }

    pub fn element(&self, value: u64) -> Result<FieldElement, VaultError> {
        if value >= self.p {
            return Err(VaultError::Unreduced { value, p: self.p });
        }
        Ok(FieldElement { value, p: self.p })
    }

    pub fn reduce(&self, value: u64) -> FieldElement {
        FieldElement {
            value: value % self.p,
            p: self.p,
        }
    }

    pub fn zero(&self) -> FieldElement {
        FieldElement {
            value: 0,
            p: self.p,
        }
    }

    pub fn one(&self) -> FieldElement {
        FieldElement {
            value: 1,
            p: self.p,
        }
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        FieldElement {
            value: rng.gen_range(0..self.p),
            p: self.p,
        }
    }

    pub fn random_nonzero<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        FieldElement {
            value: rng.gen_range(1..self.p),
            p: self.p,
        }
    }
}

/// An element of `Z/pZ`; carries its modulus. Mixing moduli in arithmetic is
/// a programming error and panics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FieldElement {
    value: u64,
    p: u64,
}

impl FieldElement {
    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn modulus(&self) -> u64 {
        self.p
    }

    pub fn field(&self) -> PrimeField {
        PrimeField { p: self.p }
    }

    pub fn is_zero(&self) -> bool {
        self.value == 0
    }

    pub fn pow(self, mut exp: u64) -> Self {
        let mut base = self;
        let mut acc = self.field().one();
        while exp > 0 {
            if exp & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            exp >>= 1;
        }
        acc
    }

    /// Multiplicative inverse via Fermat; `None` for zero.
    pub fn inverse(self) -> Option<Self> {
        (!self.is_zero()).then(|| self.pow(self.p - 2))
    }

    fn same_field(&self, other: &Self) {
        assert_eq!(self.p, other.p, "field elements from different fields");
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl Add for FieldElement {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        self.same_field(&rhs);
        // p < 2^63, so the sum cannot overflow.
        let s = self.value + rhs.value;
        Self {
            value: if s >= self.p { s - self.p } else { s },
            p: self.p,
        }
    }
}

impl Sub for FieldElement {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        self.same_field(&rhs);
        let value = if self.value >= rhs.value {
            self.value - rhs.value
        } else {
            self.value + self.p - rhs.value
        };
        Self { value, p: self.p }
    }
}

impl Neg for FieldElement {
    type Output = Self;

    fn neg(self) -> Self {
        self.field().zero() - self
    }
}

impl Mul for FieldElement {
    type Output = Self;

    fn mul(self, rhs: Self) -> Self {
        self.same_field(&rhs);
        let v = (u128::from(self.value) * u128::from(rhs.value)) % u128::from(self.p);
        Self {
            value: v as u64,
            p: self.p,
        }
    }
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((u128::from(a) * u128::from(b)) % u128::from(m)) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Miller-Rabin with the first twelve primes as witnesses, which is exact for
/// every `n < 3.3 * 10^24`.
pub(crate) fn is_prime(n: u64) -> bool {
    const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &w in &WITNESSES {
        if n.is_multiple_of(w) {
            return n == w;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &WITNESSES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}
