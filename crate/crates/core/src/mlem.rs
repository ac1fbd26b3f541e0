//! Maximum-likelihood expectation-maximization baseline.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image_model::{Image, ImageGrid};
use crate::projector::{Projector, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlemConfig {
    pub n_iterations: usize,
    /// Uniform starting value of every pixel.
    pub init_value: f64,
    /// Lower clamp applied to the sensitivity image.
    pub sensitivity_floor: f64,
}

impl Default for MlemConfig {
    fn default() -> Self {
        Self { n_iterations: 100, init_value: 1.0, sensitivity_floor: 1e-12 }
    }
}

impl MlemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return invalid("MLEM needs at least one iteration");
        }
        if !(self.init_value > 0.0 && self.init_value.is_finite()) {
            return invalid("MLEM init_value must be positive");
        }
        if !(self.sensitivity_floor > 0.0) {
            return invalid("MLEM sensitivity floor must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlemStatus {
    Completed,
    /// The sinogram held no counts; the zero image was returned.
    ZeroData,
}

#[derive(Debug, Clone)]
pub struct MlemResult {
    pub image: Image,
    /// Poisson log-likelihood (without the `ln Y!` constant) of the initial
    /// image followed by every iterate.
    pub log_likelihood: Vec<f64>,
    pub status: MlemStatus,
}

/// `sum_i Y_i ln(yhat_i) - yhat_i`, with `0 ln 0 = 0`.
pub fn poisson_log_likelihood(measured: &[f64], expected: &[f64]) -> f64 {
    measured
        .iter()
        .zip(expected)
        .map(|(&y, &e)| if y == 0.0 { -e } else { y * e.ln() - e })
        .sum()
}

pub fn mlem_reconstruct(s: &Sinogram, grid: &ImageGrid, cfg: &MlemConfig) -> Result<MlemResult> {
    let projector = Projector::new(*grid, s.geometry)?;
    mlem_with_projector(&projector, s, cfg)
}

/// Runs `x <- (x / sens) * P^T(Y / P x)` with `sens = max(P^T 1, floor)`.
/// Ratios with a zero denominator are taken as 0.
pub fn mlem_with_projector(projector: &Projector, s: &Sinogram, cfg: &MlemConfig) -> Result<MlemResult> {
    cfg.validate()?;
    mlem_from(projector, s, cfg, vec![cfg.init_value; projector.grid().len()])
}

/// MLEM started from an arbitrary nonnegative image instead of the uniform one.
pub fn mlem_from(projector: &Projector, s: &Sinogram, cfg: &MlemConfig, init: Vec<f64>) -> Result<MlemResult> {
    cfg.validate()?;
    if init.len() != projector.grid().len() || init.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return invalid("MLEM start image must match the grid and be nonnegative");
    }
    s.validate_counts()?;
    if s.geometry != *projector.geometry() {
        return Err(Error::ShapeMismatch("sinogram geometry differs from projector geometry".into()));
    }
    let grid = *projector.grid();
    if s.counts.iter().all(|c| *c == 0.0) {
        log::warn!("MLEM called on an all-zero sinogram; returning the zero image");
        return Ok(MlemResult { image: Image::zeros(grid), log_likelihood: vec![0.0], status: MlemStatus::ZeroData });
    }

    let n_bins = s.geometry.len();
    let mut sens = vec![0.0; grid.len()];
    projector.back_into(&vec![1.0; n_bins], &mut sens);
    for v in &mut sens {
        *v = v.max(cfg.sensitivity_floor);
    }

    let mut x = init;
    let mut expected = vec![0.0; n_bins];
    let mut ratio = vec![0.0; n_bins];
    let mut correction = vec![0.0; grid.len()];
    projector.forward_into(&x, &mut expected);
    let mut trace = Vec::with_capacity(cfg.n_iterations + 1);
    trace.push(poisson_log_likelihood(&s.counts, &expected));

    for _ in 0..cfg.n_iterations {
        for ((r, &y), &e) in ratio.iter_mut().zip(&s.counts).zip(&expected) {
            *r = if e > 0.0 { y / e } else { 0.0 };
        }
        projector.back_into(&ratio, &mut correction);
        for ((xv, &c), &sv) in x.iter_mut().zip(&correction).zip(&sens) {
            *xv = *xv / sv * c;
        }
        projector.forward_into(&x, &mut expected);
        trace.push(poisson_log_likelihood(&s.counts, &expected));
    }

    Ok(MlemResult { image: Image::from_values(grid, x)?, log_likelihood: trace, status: MlemStatus::Completed })
}
