//! Scalar abstraction shared by plain `f64` evaluation, reverse-mode
//! gradients ([`Var`]) and small forward-mode duals ([`Dual`]).
//!
//! Geometry, kinematics and energies are written once against [`Scalar`].
//! Expensive primitives (GPIS queries, the polar factor inside the rigid fit)
//! evaluate in `f64` and attach their local Jacobian through
//! [`Scalar::custom`].

mod dual;
mod tape;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub use dual::Dual;
pub use tape::{backward, reset_tape, tape_len, Var};

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;

    /// Node with value `value` whose derivative w.r.t. each listed input is
    /// the paired partial.
    fn custom(value: f64, partials: &[(Self, f64)]) -> Self;

    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn powi(self, n: i32) -> Self {
        let v = self.value();
        Self::custom(v.powi(n), &[(self, n as f64 * v.powi(n - 1))])
    }

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn atan2(self, x: Self) -> Self {
        let (y0, x0) = (self.value(), x.value());
        let r2 = x0 * x0 + y0 * y0;
        Self::custom(y0.atan2(x0), &[(self, x0 / r2), (x, -y0 / r2)])
    }

    /// Smaller of `self` and a constant; derivative follows the active branch.
    fn min_c(self, c: f64) -> Self {
        if self.value() < c {
            self
        } else {
            Self::cst(c)
        }
    }

    fn max_c(self, c: f64) -> Self {
        if self.value() > c {
            self
        } else {
            Self::cst(c)
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn custom(value: f64, _partials: &[(Self, f64)]) -> Self {
        value
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
}
