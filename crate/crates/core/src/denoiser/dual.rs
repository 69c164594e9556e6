//! Dual numbers for forward-mode differentiation of the denoiser.
//!
//! `Dual { re, du }` stands for `re + du·ε` with `ε² = 0`; pushing one through
//! the network carries a tangent alongside the value, which is exactly a
//! Jacobian-vector product.

use std::ops::{Add, Mul};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    #[inline]
    pub const fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }

    #[inline]
    pub const fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }

    #[inline]
    pub fn scale(self, k: f64) -> Self {
        Self::new(k * self.re, k * self.du)
    }

    #[inline]
    pub fn sigmoid(self) -> Self {
        let s = sigmoid(self.re);
        Self::new(s, s * (1.0 - s) * self.du)
    }

    #[inline]
    pub fn tanh(self) -> Self {
        let th = self.re.tanh();
        Self::new(th, (1.0 - th * th) * self.du)
    }
}

impl Add for Dual {
    type Output = Dual;

    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl Mul for Dual {
    type Output = Dual;

    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.du * rhs.re + self.re * rhs.du)
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = Dual::new(3.0, 1.0);
        let f = x * x + x.scale(2.0);
        assert_eq!(f.re, 15.0);
        assert_eq!(f.du, 8.0);
    }

    #[test]
    fn sigmoid_derivative() {
        let z = 0.3;
        let d = Dual::new(z, 1.0).sigmoid();
        let h = 1e-6;
        let fd = (sigmoid(z + h) - sigmoid(z - h)) / (2.0 * h);
        assert!((d.du - fd).abs() < 1e-9);
    }
}
