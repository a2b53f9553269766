//! Closed-form capacities and per-database symbol counts, in exact rationals.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::Width;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CapacityError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("psi domain error: {0}")]
    Domain(&'static str),
    #[error("N^K exceeds 2^40")]
    Overflow,
    #[error("rate identity failed: {rate} != {capacity}")]
    RateIdentity { rate: String, capacity: String },
}

/// `(K, M, N, T)` plus an optional forced field width (auto-selected when `None`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchemeParams {
    /// Number of messages.
    pub k: usize,
    /// Number of cached side-information messages.
    pub m: usize,
    /// Number of replicated databases.
    pub n: usize,
    /// Collusion threshold.
    pub t: usize,
    #[serde(default)]
    pub width: Option<Width>,
}

impl SchemeParams {
    pub fn new(k: usize, m: usize, n: usize, t: usize) -> Result<Self, CapacityError> {
        let p = SchemeParams { k, m, n, t, width: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_width(mut self, width: Width) -> Self {
        self.width = Some(width);
        self
    }

    pub fn validate(&self) -> Result<(), CapacityError> {
        let bad = |msg: String| Err(CapacityError::InvalidParams(msg));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.m >= self.k {
            return bad(format!("M={} must be below K={}", self.m, self.k));
        }
        if self.n == 0 {
            return bad("N must be at least 1".into());
        }
        if self.t == 0 || self.t > self.n {
            return bad(format!("T={} must satisfy 1 <= T <= N={}", self.t, self.n));
        }
        Ok(())
    }

    /// Whether the constructive scheme can be built (it needs `T < N`).
    pub fn constructible(&self) -> bool {
        self.validate().is_ok() && self.t < self.n
    }

    pub fn ratio(&self) -> BigRational {
        rational(self.t as u64, self.n as u64)
    }
}

impl fmt::Display for SchemeParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(K={}, M={}, N={}, T={})", self.k, self.m, self.n, self.t)
    }
}

pub fn rational(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Number of terms in the geometric sum inside [`psi`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terms {
    Finite(u32),
    Infinite,
}

/// `(1 + A + ... + A^(B-1))^-1`, and `1 - A` for infinitely many terms.
pub fn psi(a: &BigRational, b: Terms) -> Result<BigRational, CapacityError> {
    if a <= &BigRational::zero() {
        return Err(CapacityError::Domain("A must be positive"));
    }
    if a > &BigRational::one() {
        return Err(CapacityError::Domain("A must not exceed 1"));
    }
    match b {
        Terms::Finite(0) => Err(CapacityError::Domain("B must be at least 1")),
        Terms::Finite(b) => {
            let mut sum = BigRational::zero();
            let mut term = BigRational::one();
            for _ in 0..b {
                sum += &term;
                term *= a;
            }
            Ok(sum.recip())
        }
        Terms::Infinite if a.is_one() => Err(CapacityError::Domain("A must be below 1 when B is infinite")),
        Terms::Infinite => Ok(BigRational::one() - a),
    }
}

/// `Psi(T/N, K-M)`.
pub fn capacity_tpir_psi(p: &SchemeParams) -> Result<BigRational, CapacityError> {
    p.validate()?;
    psi(&p.ratio(), Terms::Finite((p.k - p.m) as u32))
}

/// Piecewise symmetric capacity: 1 when `M = K-1`, `1 - T/N` with enough
/// common randomness, 0 otherwise.
pub fn capacity_stpir_psi(p: &SchemeParams, rho: &BigRational) -> Result<BigRational, CapacityError> {
    p.validate()?;
    if p.k < 2 {
        return Err(CapacityError::InvalidParams("the symmetric setting needs K >= 2".into()));
    }
    if p.m == p.k - 1 {
        return Ok(BigRational::one());
    }
    if p.t == p.n {
        return Ok(BigRational::zero());
    }
    if rho < &BigRational::zero() {
        return Err(CapacityError::InvalidParams("rho must be nonnegative".into()));
    }
    if rho >= &required_randomness(p) {
        Ok(BigRational::one() - p.ratio())
    } else {
        Ok(BigRational::zero())
    }
}

/// The common-randomness threshold `T/(N-T)`. Requires `T < N`.
pub fn required_randomness(p: &SchemeParams) -> BigRational {
    rational(p.t as u64, (p.n - p.t) as u64)
}

/// Per-database symbol counts of the TPIR-PSI scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountProfile {
    /// Symbols per database before redundancy removal.
    pub p1: u64,
    /// Of those, symbols computable from side information.
    pub p2: u64,
    /// Desired-message symbols per database.
    pub m: u64,
    /// Message length in symbols, `N^K`.
    pub l: u64,
}

const MAX_LENGTH: u64 = 1 << 40;

fn checked_pow(base: u64, exp: usize) -> Result<u64, CapacityError> {
    let mut acc: u64 = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base).ok_or(CapacityError::Overflow)?;
        if acc > MAX_LENGTH {
            return Err(CapacityError::Overflow);
        }
    }
    Ok(acc)
}

/// Instances of each k-sum type per database in layer `k`: `(N-T)^(k-1) T^(K-k)`.
pub fn layer_instances(p: &SchemeParams, layer: usize) -> u64 {
    ((p.n - p.t) as u64).pow(layer as u32 - 1) * (p.t as u64).pow((p.k - layer) as u32)
}

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i as u64 + 1))
}

pub fn count_profile(p: &SchemeParams) -> Result<CountProfile, CapacityError> {
    p.validate()?;
    let (k, m, n, t) = (p.k, p.m, p.n as u64, p.t as u64);
    let l = checked_pow(n, k)?;
    let n_km1 = checked_pow(n, k - 1)?;
    let (p1, p2) = if t < n {
        let t_k = checked_pow(t, k)?;
        let p1 = (l - t_k) / (n - t);
        let p2 = checked_pow(t, k - m)? * (checked_pow(n, m)? - checked_pow(t, m)?) / (n - t);
        (p1, p2)
    } else {
        // T = N: geometric-sum limits.
        (k as u64 * n_km1, m as u64 * n_km1)
    };
    let profile = CountProfile { p1, p2, m: n_km1, l };

    let rate = rational(p.n as u64 * profile.m, p.n as u64 * (p1 - p2));
    let capacity = capacity_tpir_psi(p)?;
    if rate != capacity {
        return Err(CapacityError::RateIdentity { rate: rate.to_string(), capacity: capacity.to_string() });
    }
    Ok(profile)
}
