//! Forward-mode automatic differentiation with dual numbers.
//!
//! [`Dual<T>`] carries a value and a single tangent. Nesting the type
//! (`Dual<Dual<f64>>`) gives exact second derivatives: seed the outer tangent
//! with direction `i`, the inner tangent with direction `j`, and read
//! `eps.eps` for the mixed partial `d²f / dz_i dz_j`.
//!
//! Model code is written once against the [`Real`] trait and evaluated with
//! `f64`, `Dual<f64>` or `Dual<Dual<f64>>`.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar field used by the vehicle model and curvature lookups.
pub trait Real:
    Copy
    + fmt::Debug
    + PartialEq
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
    /// Constant with zero tangent.
    fn cst(v: f64) -> Self;
    /// Primal value, stripping every tangent level.
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan(self) -> Self;
    fn sqrt(self) -> Self;

    fn powi2(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
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
    fn atan(self) -> Self {
        f64::atan(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Real> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Self { re, eps }
    }

    /// Independent variable: tangent seeded with one.
    pub fn var(re: T) -> Self {
        Self {
            re,
            eps: T::cst(1.0),
        }
    }

    /// Apply a scalar function given its value and derivative at `re`.
    #[inline]
    fn chain(self, f: T, df: T) -> Self {
        Self {
            re: f,
            eps: self.eps * df,
        }
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = T::cst(1.0) / o.re;
        let re = self.re * inv;
        Self::new(re, (self.eps - re * o.eps) * inv)
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl<T: Real> Add<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        Self::new(self.re + c, self.eps)
    }
}

impl<T: Real> Sub<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, c: f64) -> Self {
        Self::new(self.re - c, self.eps)
    }
}

impl<T: Real> Mul<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        Self::new(self.re * c, self.eps * c)
    }
}

impl<T: Real> Div<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        Self::new(self.re / c, self.eps / c)
    }
}

impl<T: Real> Real for Dual<T> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::new(T::cst(v), T::cst(0.0))
    }
    #[inline]
    fn value(&self) -> f64 {
        self.re.value()
    }
    #[inline]
    fn sin(self) -> Self {
        let s = self.re.sin();
        self.chain(s, self.re.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        let c = self.re.cos();
        self.chain(c, -self.re.sin())
    }
    #[inline]
    fn atan(self) -> Self {
        let d = T::cst(1.0) / (self.re * self.re + 1.0);
        self.chain(self.re.atan(), d)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::cst(0.5) / s)
    }
}

/// Second-order nested dual.
pub type Dual2 = Dual<Dual<f64>>;

/// Seed a second-order variable: outer tangent along `i`, inner along `j`.
pub fn seed2(v: f64, outer: bool, inner: bool) -> Dual2 {
    let o = if outer { 1.0 } else { 0.0 };
    let n = if inner { 1.0 } else { 0.0 };
    Dual::new(Dual::new(v, n), Dual::new(o, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<T: Real>(x: T, y: T) -> T {
        (x * y).sin() + (x / (y + 2.0)).atan() * x.cos() + (x * x + 1.0).sqrt()
    }

    #[test]
    fn first_derivative_matches_central_difference() {
        let (x, y) = (0.7, -0.3);
        let d = f(Dual::var(x), Dual::cst(y)).eps;
        let h = 1e-6;
        let fd = (f(x + h, y) - f(x - h, y)) / (2.0 * h);
        assert!((d - fd).abs() < 1e-8, "{d} vs {fd}");
    }

    #[test]
    fn nested_dual_gives_mixed_partial() {
        let (x, y) = (0.4, 1.1);
        let out = f(seed2(x, true, false), seed2(y, false, true));
        let h = 1e-4;
        let fxy = (f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h))
            / (4.0 * h * h);
        assert!((out.eps.eps - fxy).abs() < 1e-6, "{} vs {fxy}", out.eps.eps);
        // inner tangent alone is the plain partial in y
        let dy = f(Dual::cst(x), Dual::var(y)).eps;
        assert!((out.re.eps - dy).abs() < 1e-14);
    }

    #[test]
    fn constants_have_no_tangent() {
        let c = Dual2::cst(3.0) * 2.0 + 1.0;
        assert_eq!(c.value(), 7.0);
        assert_eq!(c.eps.eps, 0.0);
        assert_eq!(c.re.eps, 0.0);
    }
}
