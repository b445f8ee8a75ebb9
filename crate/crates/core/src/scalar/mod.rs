//! Smooth scalar rings.
//!
//! Every evaluation in this crate (expression trees, integrators, Poincaré
//! maps) is written once against [`Scalar`] and then run over plain `f64`,
//! truncated Taylor polynomials ([`Jet`]) or forward-mode duals ([`Dual`]).

mod dual;
mod jet;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub use dual::{dual_gradient, dual_hessian, Dual};
pub use jet::{EpsJet, Jet};

/// Inline storage for derivative directions and Taylor coefficients.
pub(crate) type Buf<S> = smallvec::SmallVec<[S; 4]>;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScalarError {
    #[error("division by a ring zero (divisor has vanishing constant part)")]
    DivisionByZero,
    #[error("jet degree mismatch: {0} vs {1}")]
    DegreeMismatch(usize, usize),
    #[error("dual direction count mismatch: {0} vs {1}")]
    DirectionMismatch(usize, usize),
}

/// Commutative ring with the elementary functions needed by the
/// expression language.
///
/// `value()` is the real part: the float itself, the constant term of a
/// jet, or the primal value of a dual (recursively for nested types).
pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(c: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn one() -> Self {
        Self::constant(1.0)
    }

    /// Multiplication by a real constant.
    fn scale(&self, c: f64) -> Self {
        self.clone() * Self::constant(c)
    }

    /// Integer power by repeated squaring.
    fn powi(&self, n: u32) -> Self {
        let mut result = Self::one();
        let mut base = self.clone();
        let mut e = n;
        while e > 0 {
            if e & 1 == 1 {
                result = result * base.clone();
            }
            e >>= 1;
            if e > 0 {
                base = base.clone() * base;
            }
        }
        result
    }

    /// Division that refuses divisors whose real part is exactly zero.
    fn try_div(&self, rhs: &Self) -> Result<Self, ScalarError> {
        if rhs.value() == 0.0 {
            return Err(ScalarError::DivisionByZero);
        }
        Ok(self.clone() / rhs.clone())
    }
}

impl Scalar for f64 {
    fn constant(c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
    fn powi(&self, n: u32) -> Self {
        // Same squaring chain as the generic default so every realization
        // agrees bit-for-bit on the real part.
        let mut result = 1.0;
        let mut base = *self;
        let mut e = n;
        while e > 0 {
            if e & 1 == 1 {
                result *= base;
            }
            e >>= 1;
            if e > 0 {
                base *= base;
            }
        }
        result
    }
}
