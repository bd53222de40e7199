//! Exact integer combinatorics: binomials, the `Λ^ν(N', m', r)` kernel and the
//! dimensions `d(N:ν)` of the `U(N)` irreps `{2^ν 1^(N-2ν)}`.
//!
//! Everything here is exact. Conversions to `f64` happen in `analytic`, once
//! per formula, after all sums have been accumulated as integers.

use std::fmt;
use std::ops::{Add, Mul};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CombinatError {
    #[error("integer overflow while evaluating {0}")]
    Overflow(String),
    #[error("d({n}:{nu}) is negative; nu lies outside the irrep range 0..={half}", half = .n / 2)]
    InvalidIrrep { n: i64, nu: i64 },
}

pub type Result<T> = std::result::Result<T, CombinatError>;

/// Exact non-negative count, wide enough for `binom(40,20)^2` and well beyond.
///
/// Arithmetic is checked; overflow surfaces as [`CombinatError::Overflow`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BigCount(u128);

impl BigCount {
    pub const ZERO: BigCount = BigCount(0);
    pub const ONE: BigCount = BigCount(1);

    pub const fn new(value: u128) -> Self {
        BigCount(value)
    }

    pub const fn get(self) -> u128 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_add(self, rhs: BigCount) -> Result<BigCount> {
        self.0
            .checked_add(rhs.0)
            .map(BigCount)
            .ok_or_else(|| CombinatError::Overflow(format!("{} + {}", self.0, rhs.0)))
    }

    pub fn checked_mul(self, rhs: BigCount) -> Result<BigCount> {
        self.0
            .checked_mul(rhs.0)
            .map(BigCount)
            .ok_or_else(|| CombinatError::Overflow(format!("{} * {}", self.0, rhs.0)))
    }

    /// Nearest `f64`; the only place counts turn into floats.
    pub fn to_f64(self) -> f64 {
        self.0 as f64
    }
}

impl fmt::Display for BigCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for BigCount {
    fn from(v: u64) -> Self {
        BigCount(v as u128)
    }
}

// Unchecked operators panic on overflow in every build profile; use them
// only where the operands are already known to be small.
impl Add for BigCount {
    type Output = BigCount;
    fn add(self, rhs: BigCount) -> BigCount {
        self.checked_add(rhs).expect("BigCount addition overflow")
    }
}

impl Mul for BigCount {
    type Output = BigCount;
    fn mul(self, rhs: BigCount) -> BigCount {
        self.checked_mul(rhs).expect("BigCount multiplication overflow")
    }
}

/// Binomial coefficient `C(n, r)`; zero when `r < 0`, `r > n` or `n < 0`.
pub fn binom(n: i64, r: i64) -> Result<BigCount> {
    if n < 0 || r < 0 || r > n {
        return Ok(BigCount::ZERO);
    }
    let r = r.min(n - r) as u128;
    let n = n as u128;
    // acc * (n - r + i) is divisible by i at every step; divide via gcd to
    // delay overflow as long as the final value fits.
    let mut acc: u128 = 1;
    for i in 1..=r {
        let num = n - r + i;
        let g = gcd(acc, i);
        let (a, d) = (acc / g, i / g);
        let num = num / d;
        acc = a
            .checked_mul(num)
            .ok_or_else(|| CombinatError::Overflow(format!("binom({n}, {r})")))?;
    }
    Ok(BigCount(acc))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// `Λ^μ(N', m', r) = C(m' - μ, r) · C(N' - m' + r - μ, r)`.
pub fn lambda_coeff(np: i64, mp: i64, r: i64, mu: i64) -> Result<BigCount> {
    let first = binom(mp - mu, r)?;
    if first.is_zero() {
        return Ok(BigCount::ZERO);
    }
    let second = binom(np - mp + r - mu, r)?;
    first.checked_mul(second)
}

/// Signed value of `C(N,ν)^2 - C(N,ν-1)^2`, defined for every `ν`.
pub fn d_irrep_signed(n: i64, nu: i64) -> Result<i128> {
    let a = binom(n, nu)?;
    let b = binom(n, nu - 1)?;
    let sq = |c: BigCount| {
        c.checked_mul(c).and_then(|v| {
            i128::try_from(v.get()).map_err(|_| CombinatError::Overflow(format!("d({n}:{nu})")))
        })
    };
    Ok(sq(a)? - sq(b)?)
}

/// `d(N:ν)`, the dimension of the `U(N)` irrep `{2^ν 1^(N-2ν)}`.
///
/// A negative formula value means `ν > N/2` and is reported as an error.
pub fn d_irrep(n: i64, nu: i64) -> Result<BigCount> {
    let v = d_irrep_signed(n, nu)?;
    if v < 0 {
        return Err(CombinatError::InvalidIrrep { n, nu });
    }
    Ok(BigCount(v as u128))
}
