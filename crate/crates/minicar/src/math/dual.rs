//! Fixed-width forward-mode dual numbers.
//!
//! Model code (dynamics, sensor maps, track interpolation) is written once,
//! generically over [`Real`], and evaluated either with `f64` for values or
//! with [`Dual`] for values plus first derivatives. The derivative width is
//! fixed at [`LANES`]: wide enough for the largest seeding in the crate
//! (state 6 + input 2 + model parameters 15, or state 6 + one lighthouse
//! station 16) so a single monomorphization serves everything.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Number of derivative lanes carried by [`Dual`].
pub const LANES: usize = 24;

/// Scalar abstraction implemented by `f64` and [`Dual`].
///
/// Branch decisions inside generic code must use [`Real::value`] so both
/// instantiations take the same path at the same point.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn atan(self) -> Self;
    /// Four-quadrant arctangent; `self` is the y argument.
    fn atan2(self, x: Self) -> Self;
    fn asin(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    /// Sign with `signum0(0) = 0`; treated as locally constant (zero
    /// derivative) everywhere.
    fn signum0(self) -> Self;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    fn asin(self) -> Self {
        f64::asin(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn signum0(self) -> Self {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Value plus `LANES` first derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; LANES],
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; LANES] }
    }

    /// A variable seeded on derivative lane `lane`.
    pub fn variable(v: f64, lane: usize) -> Self {
        let mut d = [0.0; LANES];
        d[lane] = 1.0;
        Dual { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        let mut d = [0.0; LANES];
        for i in 0..LANES {
            d[i] = dv * self.d[i];
        }
        Dual { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        let mut d = [0.0; LANES];
        for i in 0..LANES {
            d[i] = self.d[i] + rhs.d[i];
        }
        Dual { v: self.v + rhs.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        let mut d = [0.0; LANES];
        for i in 0..LANES {
            d[i] = self.d[i] - rhs.d[i];
        }
        Dual { v: self.v - rhs.v, d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        let mut d = [0.0; LANES];
        for i in 0..LANES {
            d[i] = self.v * rhs.d[i] + rhs.v * self.d[i];
        }
        Dual { v: self.v * rhs.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; LANES];
        for i in 0..LANES {
            d[i] = (self.d[i] - v * rhs.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        let mut d = [0.0; LANES];
        for i in 0..LANES {
            d[i] = -self.d[i];
        }
        Dual { v: -self.v, d }
    }
}

impl Real for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        self.map(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.map(self.v.cos(), -self.v.sin())
    }
    fn tan(self) -> Self {
        let c = self.v.cos();
        self.map(self.v.tan(), 1.0 / (c * c))
    }
    fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
    fn atan2(self, x: Self) -> Self {
        let y = self;
        let denom = x.v * x.v + y.v * y.v;
        let v = y.v.atan2(x.v);
        let mut d = [0.0; LANES];
        for i in 0..LANES {
            d[i] = (x.v * y.d[i] - y.v * x.d[i]) / denom;
        }
        Dual { v, d }
    }
    fn asin(self) -> Self {
        self.map(self.v.asin(), 1.0 / (1.0 - self.v * self.v).sqrt())
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.map(s, 0.5 / s)
    }
    fn abs(self) -> Self {
        let sg = Real::signum0(self.v);
        self.map(self.v.abs(), sg)
    }
    fn signum0(self) -> Self {
        Dual::constant(Real::signum0(self.v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar test function exercising every trait operation.
    fn composite<S: Real>(a: S, b: S) -> S {
        let one = S::from_f64(1.0);
        let t = a * b + a.sin() * b.cos() - a.atan() / (b * b + one);
        let u = (t * t + one).sqrt() + a.atan2(b) + (a * S::from_f64(0.3)).asin();
        u + t.tan() * S::from_f64(0.1) + a.abs()
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let pts = [(0.7, 1.3), (-0.4, 2.0), (1.1, -0.8)];
        let h = 1e-6;
        for &(a, b) in &pts {
            let da = composite(Dual::variable(a, 0), Dual::constant(b));
            let db = composite(Dual::constant(a), Dual::variable(b, 1));
            let fda = (composite(a + h, b) - composite(a - h, b)) / (2.0 * h);
            let fdb = (composite(a, b + h) - composite(a, b - h)) / (2.0 * h);
            assert!((da.d[0] - fda).abs() < 1e-7, "d/da {} vs {}", da.d[0], fda);
            assert!((db.d[1] - fdb).abs() < 1e-7, "d/db {} vs {}", db.d[1], fdb);
            assert!((da.v - composite(a, b)).abs() < 1e-14);
        }
    }

    #[test]
    fn signum0_is_zero_at_zero_with_zero_derivative() {
        let z = Real::signum0(Dual::variable(0.0, 0));
        assert_eq!(z.v, 0.0);
        assert_eq!(z.d[0], 0.0);
        assert_eq!(Real::signum0(2.5_f64), 1.0);
        assert_eq!(Real::signum0(-2.5_f64), -1.0);
    }
}
