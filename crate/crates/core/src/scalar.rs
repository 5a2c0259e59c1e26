//! Scalar abstraction shared by the floating-point pipeline and the
//! exact-rational oracles.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive};

/// Ordered field elements the network code can run on.
///
/// Implemented for `f64` (the main pipeline) and `BigRational`
/// (exactness checks on small integer or dyadic instances).
pub trait Scalar: Clone + Debug + PartialOrd + Signed + AddAssign + SubAssign + MulAssign + Send + Sync + 'static {
    fn to_f64(&self) -> f64;

    fn is_finite(&self) -> bool {
        true
    }

    fn from_i64(v: i64) -> Self;

    fn max_abs<'a, I: IntoIterator<Item = &'a Self>>(values: I) -> Self {
        let mut best = Self::zero();
        for v in values {
            let a = v.abs();
            if a > best {
                best = a;
            }
        }
        best
    }
}

impl Scalar for f64 {
    fn to_f64(&self) -> f64 {
        *self
    }

    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }

    fn from_i64(v: i64) -> Self {
        v as f64
    }
}

impl Scalar for BigRational {
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }

    fn from_i64(v: i64) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }
}

/// Exact rational with the given numerator and denominator.
pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Exact conversion of a finite float into a rational.
pub fn rational_from_f64(v: f64) -> Option<BigRational> {
    BigRational::from_float(v)
}
