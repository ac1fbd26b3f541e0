//! Real Zernike polynomials on a disk of radius `fov_radius`.
//!
//! Convention: `rho = sqrt(x^2 + y^2) / fov_radius`, `theta = atan2(y, x)`,
//! `Z(n, m) = R(n, |m|)(rho) * cos(m theta)` for `m >= 0` and
//! `R(n, |m|)(rho) * sin(|m| theta)` for `m < 0`. Radial polynomials are not
//! normalized, so `R(n, m)(1) = 1`. Outside the disk every polynomial is 0.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A valid `(n, m)` index pair: `|m| <= n` and `n - |m|` even.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ZernikeIndex {
    pub n: u32,
    pub m: i32,
}

impl ZernikeIndex {
    pub fn new(n: u32, m: i32) -> Result<Self> {
        let m_abs = m.unsigned_abs();
        if m_abs > n || (n - m_abs) % 2 != 0 {
            return invalid(format!("invalid Zernike index pair (n={n}, m={m})"));
        }
        Ok(Self { n, m })
    }

    /// Value of the polynomial at `(x, y)` in mm.
    pub fn eval(self, x: f64, y: f64, fov_radius: f64) -> f64 {
        let rho = (x * x + y * y).sqrt() / fov_radius;
        if rho > 1.0 {
            return 0.0;
        }
        let m_abs = self.m.unsigned_abs();
        let radial = radial_polynomial(self.n, m_abs, rho);
        if self.m == 0 {
            return radial;
        }
        let theta = y.atan2(x);
        if self.m > 0 {
            radial * (f64::from(m_abs) * theta).cos()
        } else {
            radial * (f64::from(m_abs) * theta).sin()
        }
    }
}

impl std::fmt::Display for ZernikeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "C[{},{}]", self.n, self.m)
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Unnormalized radial polynomial `R(n, m)(rho)`; requires `n - m` even.
pub fn radial_polynomial(n: u32, m: u32, rho: f64) -> f64 {
    let half_sum = (n + m) / 2;
    let half_diff = (n - m) / 2;
    (0..=half_diff)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let coeff = sign * factorial(n - k)
                / (factorial(k) * factorial(half_sum - k) * factorial(half_diff - k));
            coeff * rho.powi((n - 2 * k) as i32)
        })
        .sum()
}

/// All index pairs with `n <= n_max`, ordered by `n` then `m` ascending.
pub fn indices(n_max: u32) -> Vec<ZernikeIndex> {
    let mut out = Vec::with_capacity(term_count(n_max));
    for n in 0..=n_max {
        let n_i = n as i32;
        let mut m = -n_i;
        while m <= n_i {
            out.push(ZernikeIndex { n, m });
            m += 2;
        }
    }
    out
}

pub fn term_count(n_max: u32) -> usize {
    let n = n_max as usize;
    (n + 1) * (n + 2) / 2
}

/// Checked evaluation of a single polynomial.
pub fn zernike_eval(n: u32, m: i32, x: f64, y: f64, fov_radius: f64) -> Result<f64> {
    Ok(ZernikeIndex::new(n, m)?.eval(x, y, fov_radius))
}
