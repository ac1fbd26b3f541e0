//! Parametric activity model: soft-edged elliptical hotspots on a smooth
//! Zernike background, and its rendering onto a pixel grid.
//!
//! A hotspot contributes `A / (exp((r - R) / (s R)) + 1)` where `r` is the
//! distance to its center and `R` the directional radius of its ellipse
//! boundary (see [`ellipse_radius`]). The model is supported on the disk of
//! radius `fov_radius`; every evaluation outside it is 0.
//!
//! Coordinates are in mm with the origin at the grid center. Pixel `(i, j)`
//! (column `i`, row `j`) has its center at
//! `x = (i + 0.5 - width/2) * pixel_size`, `y = (j + 0.5 - height/2) * pixel_size`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::zernike::{self, ZernikeIndex};

/// Bound on the Fermi exponent; `exp(500)` is already far past saturation.
pub const FERMI_CLAMP: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub width_px: usize,
    pub height_px: usize,
    /// mm
    pub pixel_size: f64,
    /// mm; the model support disk.
    pub fov_radius: f64,
}

impl ImageGrid {
    pub fn new(width_px: usize, height_px: usize, pixel_size: f64, fov_radius: f64) -> Result<Self> {
        let grid = Self { width_px, height_px, pixel_size, fov_radius };
        grid.validate()?;
        Ok(grid)
    }

    /// 128 x 128 pixels of 0.4 mm with a 25 mm support disk.
    pub fn standard() -> Self {
        Self { width_px: 128, height_px: 128, pixel_size: 0.4, fov_radius: 25.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return invalid("grid dimensions must be positive");
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return invalid("pixel_size must be positive");
        }
        if !(self.fov_radius > 0.0 && self.fov_radius.is_finite()) {
            return invalid("fov_radius must be positive");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width_px * self.height_px
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn x_of(&self, i: usize) -> f64 {
        (i as f64 + 0.5 - self.width_px as f64 / 2.0) * self.pixel_size
    }

    #[inline]
    pub fn y_of(&self, j: usize) -> f64 {
        (j as f64 + 0.5 - self.height_px as f64 / 2.0) * self.pixel_size
    }

    pub fn pixel_center(&self, index: usize) -> (f64, f64) {
        (self.x_of(index % self.width_px), self.y_of(index / self.width_px))
    }

    #[inline]
    pub fn in_fov(&self, x: f64, y: f64) -> bool {
        x * x + y * y <= self.fov_radius * self.fov_radius
    }

    /// True when the support disk extends past the grid edges (clipped).
    pub fn clips_fov(&self) -> bool {
        let half_w = self.width_px as f64 * self.pixel_size / 2.0;
        let half_h = self.height_px as f64 * self.pixel_size / 2.0;
        half_w < self.fov_radius || half_h < self.fov_radius
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_size * self.pixel_size
    }
}

/// One soft-edged elliptical hotspot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotspotParams {
    /// Activity at the center; negative values describe cold spots.
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub x: f64,
    pub y: f64,
    /// Semi-axis along the rotated x direction (mm).
    pub u: f64,
    /// Semi-axis along the rotated y direction (mm).
    pub v: f64,
    /// Rotation in radians, canonical range `[0, pi)`.
    pub phi: f64,
    /// Diffuseness of the radial profile.
    pub s: f64,
}

impl HotspotParams {
    pub fn circular(amplitude: f64, x: f64, y: f64, radius: f64, s: f64) -> Self {
        Self { amplitude, x, y, u: radius, v: radius, phi: 0.0, s }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.amplitude, self.x, self.y, self.u, self.v, self.phi, self.s];
        if fields.iter().any(|v| !v.is_finite()) {
            return invalid("hotspot parameters must be finite");
        }
        if self.u <= 0.0 || self.v <= 0.0 {
            return invalid("hotspot semi-axes must be positive");
        }
        if self.s <= 0.0 {
            return invalid("hotspot diffuseness must be positive");
        }
        Ok(())
    }

    /// Same hotspot with `phi` folded into `[0, pi)`.
    pub fn canonical(mut self) -> Self {
        self.phi = canonical_angle(self.phi);
        self
    }

    /// Hotspot term at `(x, y)`, ignoring the support disk.
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.x;
        let dy = y - self.y;
        let r = (dx * dx + dy * dy).sqrt();
        let radius = ellipse_radius(self, dx, dy);
        self.amplitude * fermi((r - radius) / (self.s * radius))
    }

    pub fn max_semi_axis(&self) -> f64 {
        self.u.max(self.v)
    }
}

pub fn canonical_angle(phi: f64) -> f64 {
    let folded = phi.rem_euclid(PI);
    // rem_euclid can round up to exactly PI for tiny negative inputs.
    if folded >= PI {
        0.0
    } else {
        folded
    }
}

#[inline]
pub fn fermi(z: f64) -> f64 {
    1.0 / (z.clamp(-FERMI_CLAMP, FERMI_CLAMP).exp() + 1.0)
}

/// Distance from the hotspot center to its ellipse boundary along the
/// direction of the offset `(dx, dy)`.
///
/// The offset is rotated by `-phi` into the ellipse frame; with
/// `theta' = atan2(dy', dx')` the result is
/// `u v / sqrt((v cos theta')^2 + (u sin theta')^2)`. A zero offset uses
/// `theta' = 0`, giving `u`.
#[inline]
pub fn ellipse_radius(h: &HotspotParams, dx: f64, dy: f64) -> f64 {
    if h.u == h.v {
        return h.u;
    }
    let (sin_phi, cos_phi) = h.phi.sin_cos();
    let dxp = dx * cos_phi + dy * sin_phi;
    let dyp = -dx * sin_phi + dy * cos_phi;
    let r = (dxp * dxp + dyp * dyp).sqrt();
    if r == 0.0 {
        return h.u;
    }
    let a = h.v * dxp;
    let b = h.u * dyp;
    h.u * h.v * r / (a * a + b * b).sqrt()
}

/// Zernike expansion coefficients up to radial order `n_max`, stored in the
/// order of [`zernike::indices`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BackgroundRepr", into = "BackgroundRepr")]
pub struct BackgroundCoeffs {
    n_max: u32,
    coefficients: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BackgroundRepr {
    n_max: u32,
    #[serde(rename = "C")]
    terms: Vec<TermRepr>,
}

#[derive(Serialize, Deserialize)]
struct TermRepr {
    n: u32,
    m: i32,
    #[serde(rename = "C")]
    value: f64,
}

impl TryFrom<BackgroundRepr> for BackgroundCoeffs {
    type Error = Error;

    fn try_from(repr: BackgroundRepr) -> Result<Self> {
        let mut coeffs = BackgroundCoeffs::zeros(repr.n_max);
        if repr.terms.len() != coeffs.coefficients.len() {
            return invalid(format!(
                "background n_max={} needs {} coefficients, got {}",
                repr.n_max,
                coeffs.coefficients.len(),
                repr.terms.len()
            ));
        }
        let order = zernike::indices(repr.n_max);
        for term in repr.terms {
            let idx = ZernikeIndex::new(term.n, term.m)?;
            let pos = order
                .iter()
                .position(|o| *o == idx)
                .ok_or_else(|| Error::InvalidInput(format!("term {idx} exceeds n_max")))?;
            coeffs.coefficients[pos] = term.value;
        }
        Ok(coeffs)
    }
}

impl From<BackgroundCoeffs> for BackgroundRepr {
    fn from(b: BackgroundCoeffs) -> Self {
        let terms = zernike::indices(b.n_max)
            .into_iter()
            .zip(b.coefficients)
            .map(|(idx, value)| TermRepr { n: idx.n, m: idx.m, value })
            .collect();
        BackgroundRepr { n_max: b.n_max, terms }
    }
}

impl BackgroundCoeffs {
    pub fn zeros(n_max: u32) -> Self {
        Self { n_max, coefficients: vec![0.0; zernike::term_count(n_max)] }
    }

    pub fn new(n_max: u32, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != zernike::term_count(n_max) {
            return invalid(format!(
                "background n_max={n_max} needs {} coefficients, got {}",
                zernike::term_count(n_max),
                coefficients.len()
            ));
        }
        Ok(Self { n_max, coefficients })
    }

    /// Only the constant term set.
    pub fn constant(n_max: u32, value: f64) -> Self {
        let mut b = Self::zeros(n_max);
        b.coefficients[0] = value;
        b
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn indices(&self) -> Vec<ZernikeIndex> {
        zernike::indices(self.n_max)
    }

    pub fn eval(&self, x: f64, y: f64, fov_radius: f64) -> f64 {
        if self.coefficients.iter().all(|c| *c == 0.0) {
            return 0.0;
        }
        self.indices()
            .into_iter()
            .zip(&self.coefficients)
            .map(|(idx, c)| if *c == 0.0 { 0.0 } else { c * idx.eval(x, y, fov_radius) })
            .sum()
    }
}

/// The full model parameter set: hotspots plus background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub hotspots: Vec<HotspotParams>,
    pub background: BackgroundCoeffs,
}

impl ParameterVector {
    pub fn new(hotspots: Vec<HotspotParams>, background: BackgroundCoeffs) -> Self {
        Self { hotspots, background }
    }

    pub fn validate(&self, fov_radius: f64) -> Result<()> {
        for h in &self.hotspots {
            h.validate()?;
            if h.x * h.x + h.y * h.y > fov_radius * fov_radius {
                return invalid(format!("hotspot center ({}, {}) outside the FOV disk", h.x, h.y));
            }
        }
        if self.background.coefficients.iter().any(|c| !c.is_finite()) {
            return invalid("background coefficients must be finite");
        }
        Ok(())
    }

    /// Canonical form: every `phi` in `[0, pi)`, hotspots sorted by `x` then `y`.
    pub fn canonicalize(&mut self) {
        for h in &mut self.hotspots {
            *h = h.canonical();
        }
        self.hotspots
            .sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    }

    pub fn canonical(mut self) -> Self {
        self.canonicalize();
        self
    }

    pub fn background_eval(&self, x: f64, y: f64, fov_radius: f64) -> f64 {
        self.background.eval(x, y, fov_radius)
    }
}

/// Model value at `(x, y)`: sum of hotspot terms plus background, 0 outside
/// the support disk.
pub fn model_eval(p: &ParameterVector, x: f64, y: f64, fov_radius: f64) -> f64 {
    if x * x + y * y > fov_radius * fov_radius {
        return 0.0;
    }
    let hot: f64 = p.hotspots.iter().map(|h| h.eval(x, y)).sum();
    hot + p.background.eval(x, y, fov_radius)
}

/// A rendered image, row-major (`values[j * width + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub grid: ImageGrid,
    pub values: Vec<f64>,
}

impl Image {
    pub fn zeros(grid: ImageGrid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_values(grid: ImageGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "image has {} values, grid expects {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.width_px + i]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Index and value of the largest pixel (first on ties).
    pub fn argmax(&self) -> (usize, f64) {
        self.values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Samples the model at every pixel center; pixels outside the support disk are 0.
pub fn render_image(p: &ParameterVector, grid: &ImageGrid) -> Image {
    let mut values = vec![0.0; grid.len()];
    values
        .par_chunks_mut(grid.width_px)
        .enumerate()
        .for_each(|(j, row)| {
            let y = grid.y_of(j);
            for (i, v) in row.iter_mut().enumerate() {
                *v = model_eval(p, grid.x_of(i), y, grid.fov_radius);
            }
        });
    Image { grid: *grid, values }
}
