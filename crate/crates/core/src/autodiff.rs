//! Scalar abstraction and forward-mode dual numbers.
//!
//! Everything on the smooth path of the objective (rotations, kinematics,
//! skinning, projection, keypoint/geometry/heatmap losses) is written once over
//! [`Real`] and evaluated either with `f64` or with [`Dual`] to obtain exact
//! directional derivatives. Gradients of functions with more inputs than `N`
//! are assembled in chunks of `N` seeded directions, see [`gradient`].

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign<f64>
{
    fn cst(v: f64) -> Self;
    /// Primal value.
    fn re(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn powi2(self) -> Self {
        self * self
    }

    fn max0(self) -> Self {
        if self.re() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
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
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// Dual number carrying `N` tangent components.
#[derive(Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> fmt::Debug for Dual<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dual({}; {:?})", self.re, &self.eps[..])
    }
}

impl<const N: usize> Dual<N> {
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: [0.0; N] }
    }

    /// Independent variable seeded along tangent direction `i`.
    pub fn variable(re: f64, i: usize) -> Self {
        let mut eps = [0.0; N];
        eps[i] = 1.0;
        Dual { re, eps }
    }

    #[inline]
    fn chain(self, re: f64, d: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= d;
        }
        Dual { re, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Dual { re: self.re * rhs.re, eps }
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
        self.chain(-self.re, -1.0)
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
        self.chain(self.re * rhs, rhs)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const N: usize> MulAssign<f64> for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: f64) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        self.chain(r, 0.5 / r)
    }
    #[inline]
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
}

/// Tangent width used by [`gradient`].
pub const CHUNK: usize = 16;

/// Value and gradient of `f` at `x`, restricted to the coordinates where
/// `active` is true (inactive coordinates get a zero gradient).
///
/// `f` is evaluated once per chunk of [`CHUNK`] active coordinates.
pub fn gradient<F>(x: &[f64], active: &[bool], mut f: F) -> (f64, Vec<f64>)
where
    F: FnMut(&[Dual<CHUNK>]) -> Dual<CHUNK>,
{
    debug_assert_eq!(x.len(), active.len());
    let idx: Vec<usize> = (0..x.len()).filter(|&i| active[i]).collect();
    let mut grad = vec![0.0; x.len()];
    let mut value = f64::NAN;
    let mut seeded: Vec<Dual<CHUNK>> = x.iter().map(|&v| Dual::constant(v)).collect();
    if idx.is_empty() {
        value = f(&seeded).re;
        return (value, grad);
    }
    for chunk in idx.chunks(CHUNK) {
        for (slot, &i) in chunk.iter().enumerate() {
            seeded[i] = Dual::variable(x[i], slot);
        }
        let out = f(&seeded);
        value = out.re;
        for (slot, &i) in chunk.iter().enumerate() {
            grad[i] = out.eps[slot];
            seeded[i] = Dual::constant(x[i]);
        }
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<T: Real>(x: &[T]) -> T {
        // x0^2 * x1 + sin(x2) * exp(x0) / sqrt(x1)
        x[0] * x[0] * x[1] + x[2].sin() * x[0].exp() / x[1].sqrt()
    }

    #[test]
    fn matches_hand_derivative() {
        let x = [0.3, 1.7, -0.4];
        let (v, g) = gradient(&x, &[true; 3], |d| poly(d));
        assert!((v - poly(&x)).abs() < 1e-15);
        let (a, b, c) = (x[0], x[1], x[2]);
        let expect = [
            2.0 * a * b + c.sin() * a.exp() / b.sqrt(),
            a * a - 0.5 * c.sin() * a.exp() * b.powf(-1.5),
            c.cos() * a.exp() / b.sqrt(),
        ];
        for i in 0..3 {
            assert!((g[i] - expect[i]).abs() < 1e-14, "{i}: {} vs {}", g[i], expect[i]);
        }
    }

    #[test]
    fn chunking_covers_many_inputs() {
        let x: Vec<f64> = (0..40).map(|i| 0.1 * i as f64).collect();
        let mut active = vec![true; 40];
        active[5] = false;
        let (_, g) = gradient(&x, &active, |d| {
            d.iter().enumerate().fold(Dual::constant(0.0), |acc, (i, &v)| acc + v * v * (i as f64))
        });
        for i in 0..40 {
            let expect = if i == 5 { 0.0 } else { 2.0 * x[i] * i as f64 };
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }
}
