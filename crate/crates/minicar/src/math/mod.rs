//! Shared numeric utilities: forward-mode dual numbers and a banded LU
//! factorization with partial pivoting.

pub mod banded;
pub mod dual;

pub use banded::BandMatrix;
pub use dual::{Dual, Real, LANES};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}
