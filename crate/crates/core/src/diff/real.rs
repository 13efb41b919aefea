use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar type that layer math is written against, so the same code runs on
/// plain `f64` and on dual numbers.
pub trait Real:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
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
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn re(&self) -> f64;

    /// Apply a unary function given its value and derivative at `re()`.
    fn chain(self, value: f64, deriv: f64) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn exp(self) -> Self {
        let e = self.re().exp();
        self.chain(e, e)
    }

    fn ln(self) -> Self {
        let x = self.re();
        self.chain(x.ln(), 1.0 / x)
    }

    fn sqrt(self) -> Self {
        let s = self.re().sqrt();
        self.chain(s, 0.5 / s)
    }

    fn cbrt(self) -> Self {
        let c = self.re().cbrt();
        self.chain(c, 1.0 / (3.0 * c * c))
    }

    fn powi(self, n: i32) -> Self {
        let x = self.re();
        let d = if n == 0 { 0.0 } else { n as f64 * x.powi(n - 1) };
        self.chain(x.powi(n), d)
    }

    fn recip(self) -> Self {
        let x = self.re();
        self.chain(1.0 / x, -1.0 / (x * x))
    }

    fn abs(self) -> Self {
        if self.re() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid(self.re());
        self.chain(s, s * (1.0 - s))
    }

    fn silu(self) -> Self {
        let x = self.re();
        let s = sigmoid(x);
        self.chain(x * s, s * (1.0 + x * (1.0 - s)))
    }

    fn softplus(self) -> Self {
        let x = self.re();
        self.chain(softplus(x), sigmoid(x))
    }

    fn tanh(self) -> Self {
        let t = self.re().tanh();
        self.chain(t, 1.0 - t * t)
    }

    fn square(self) -> Self {
        self * self
    }

    fn is_finite(&self) -> bool;
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn chain(self, value: f64, _deriv: f64) -> Self {
        value
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn cbrt(self) -> Self {
        f64::cbrt(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    #[inline]
    fn silu(self) -> Self {
        self * sigmoid(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}
