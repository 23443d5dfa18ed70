use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

/// Forward-mode dual number with `N` tangent directions stored inline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: [0.0; N] }
    }

    /// Seeds tangent direction `i`.
    pub fn variable(re: f64, i: usize) -> Self {
        let mut eps = [0.0; N];
        eps[i] = 1.0;
        Dual { re, eps }
    }

    #[inline]
    fn chain(re: f64, a: &Self, da: f64) -> Self {
        let mut eps = a.eps;
        for e in eps.iter_mut() {
            *e *= da;
        }
        Dual { re, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps.iter()) {
            *e += r;
        }
        Dual {
            re: self.re + rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps.iter()) {
            *e -= r;
        }
        Dual {
            re: self.re - rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + rhs.eps[i] * self.re;
        }
        Dual {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Dual { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::chain(-self.re, &self, -1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        Self::chain(self.re * rhs, &self, rhs)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        Self::chain(self.re / rhs, &self, 1.0 / rhs)
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }

    fn value(self) -> f64 {
        self.re
    }

    fn custom(value: f64, partials: &[(Self, f64)]) -> Self {
        let mut eps = [0.0; N];
        for (p, d) in partials {
            for i in 0..N {
                eps[i] += d * p.eps[i];
            }
        }
        Dual { re: value, eps }
    }

    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Self::chain(s, &self, 0.5 / s)
    }

    fn ln(self) -> Self {
        Self::chain(self.re.ln(), &self, 1.0 / self.re)
    }

    fn exp(self) -> Self {
        let e = self.re.exp();
        Self::chain(e, &self, e)
    }

    fn sin(self) -> Self {
        Self::chain(self.re.sin(), &self, self.re.cos())
    }

    fn cos(self) -> Self {
        Self::chain(self.re.cos(), &self, -self.re.sin())
    }
}
