//! Scalar types that analytical features can be evaluated in.
//!
//! Every feature is an integer count, except the FFT operation counts which
//! carry a `log2` factor. Features are therefore computed generically over
//! [`FeatureScalar`]: `f64`/`f32` for model inputs, and [`Exact`] when sums
//! must be compared without rounding (linearity and additivity checks).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use num_traits::Zero;

/// Numeric type that feature formulas can be evaluated in.
///
/// Formulas only ever need integer constants, `log2` of a positive integer,
/// integer scaling, and addition; nothing else is required of the scalar.
pub trait FeatureScalar:
    Clone + fmt::Debug + PartialEq + Zero + Add<Output = Self> + AddAssign + Send + Sync + 'static
{
    fn from_count(count: u128) -> Self;

    /// `log2(x)` for `x >= 1`.
    fn log2_of(x: u64) -> Self;

    fn scaled(&self, factor: u128) -> Self;

    fn to_f64(&self) -> f64;

    fn is_non_negative(&self) -> bool;
}

macro_rules! float_feature_scalar {
    ($t:ty) => {
        impl FeatureScalar for $t {
            fn from_count(count: u128) -> Self {
                count as $t
            }

            fn log2_of(x: u64) -> Self {
                debug_assert!(x >= 1);
                (x as $t).log2()
            }

            fn scaled(&self, factor: u128) -> Self {
                *self * factor as $t
            }

            fn to_f64(&self) -> f64 {
                *self as f64
            }

            fn is_non_negative(&self) -> bool {
                self.is_finite() && *self >= 0.0
            }
        }
    };
}

float_feature_scalar!(f32);
float_feature_scalar!(f64);

/// An exact value of the form `c + Σ a_p · log2(p)` over odd primes `p`,
/// with integer `c` and `a_p`.
///
/// The logarithms of distinct primes are linearly independent over the
/// rationals, so this representation is canonical and `==` is exact
/// equality of the real numbers represented.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Exact {
    constant: i128,
    log_terms: BTreeMap<u64, i128>,
}

impl Exact {
    pub fn integer(value: i128) -> Self {
        Self { constant: value, log_terms: BTreeMap::new() }
    }

    /// The integer part `c`.
    pub fn constant(&self) -> i128 {
        self.constant
    }

    /// Coefficients `a_p` keyed by odd prime `p`.
    pub fn log_terms(&self) -> &BTreeMap<u64, i128> {
        &self.log_terms
    }

    /// `Some(c)` when the value is an integer.
    pub fn as_integer(&self) -> Option<i128> {
        self.log_terms.is_empty().then_some(self.constant)
    }

    /// Integer multiple; `factor` may be negative.
    pub fn times(&self, factor: i128) -> Self {
        if factor == 0 {
            return Self::zero();
        }
        Self {
            constant: self.constant * factor,
            log_terms: self.log_terms.iter().map(|(&p, &a)| (p, a * factor)).collect(),
        }
    }

    fn prune_zero_terms(&mut self) {
        self.log_terms.retain(|_, a| *a != 0);
    }
}

fn prime_factors(mut x: u64) -> Vec<(u64, u32)> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= x {
        let mut e = 0;
        while x % p == 0 {
            x /= p;
            e += 1;
        }
        if e > 0 {
            out.push((p, e));
        }
        p += if p == 2 { 1 } else { 2 };
    }
    if x > 1 {
        out.push((x, 1));
    }
    out
}

impl Zero for Exact {
    fn zero() -> Self {
        Self::default()
    }

    fn is_zero(&self) -> bool {
        self.constant == 0 && self.log_terms.is_empty()
    }
}

impl Add for Exact {
    type Output = Exact;

    fn add(mut self, rhs: Exact) -> Exact {
        self += rhs;
        self
    }
}

impl AddAssign for Exact {
    fn add_assign(&mut self, rhs: Exact) {
        self.constant += rhs.constant;
        for (p, a) in rhs.log_terms {
            *self.log_terms.entry(p).or_insert(0) += a;
        }
        self.prune_zero_terms();
    }
}

impl FeatureScalar for Exact {
    fn from_count(count: u128) -> Self {
        Self::integer(count as i128)
    }

    fn log2_of(x: u64) -> Self {
        assert!(x >= 1, "log2 of zero");
        let mut out = Self::zero();
        for (p, e) in prime_factors(x) {
            if p == 2 {
                out.constant += e as i128;
            } else {
                out.log_terms.insert(p, e as i128);
            }
        }
        out
    }

    fn scaled(&self, factor: u128) -> Self {
        self.times(factor as i128)
    }

    fn to_f64(&self) -> f64 {
        self.log_terms
            .iter()
            .fold(self.constant as f64, |acc, (&p, &a)| acc + a as f64 * (p as f64).log2())
    }

    fn is_non_negative(&self) -> bool {
        if self.log_terms.values().all(|&a| a >= 0) {
            return self.constant >= 0;
        }
        self.to_f64() >= 0.0
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.constant)?;
        for (p, a) in &self.log_terms {
            write!(f, " {} {}·log2({})", if *a < 0 { '-' } else { '+' }, a.abs(), p)?;
        }
        Ok(())
    }
}
