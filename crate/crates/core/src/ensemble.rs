//! Ensemble construction: uniform sampling of model parameters from prior
//! boxes, chi-square scoring of each candidate against the measured
//! sinogram, and probability weights `exp(-(chi2 - chi2_min) / 2)`.
//!
//! Sampling proceeds in stages. Stage 0 draws uniformly from the prior box.
//! Each later stage draws uniformly from the bounding box of the members
//! sampled so far whose weight is at least 0.1 (falling back to the best
//! `max(10, n/1000)` members by chi-square when fewer qualify), widened by
//! 25% about its center and clipped to the prior box.
//!
//! All draws of a stage come from a ChaCha8 stream seeded with
//! `derive_seed(seed, "stage/<k>")` and are fixed before the members are
//! scored in parallel, so results do not depend on the thread schedule.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image_model::{fermi, render_image, BackgroundCoeffs, HotspotParams, ImageGrid, ParameterVector};
use crate::projector::{Projector, Sinogram};
use crate::seed::derive_seed;
use crate::zernike;

/// Weight threshold defining the members that shape the next stage box.
pub const REFINE_WEIGHT_THRESHOLD: f64 = 0.1;
/// Relative widening of the refined box.
pub const REFINE_EXPANSION: f64 = 0.25;
/// Fermi exponent beyond which a hotspot term is dropped (factor < 1e-7).
const WINDOW_Z_CUT: f64 = 16.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    Fixed(f64),
    Uniform([f64; 2]),
}

impl Prior {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Prior::Uniform([lo, hi])
    }

    fn validate(&self, what: &str) -> Result<()> {
        match *self {
            Prior::Fixed(v) if v.is_finite() => Ok(()),
            Prior::Uniform([lo, hi]) if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            Prior::Uniform([lo, hi]) if lo.is_finite() && hi.is_finite() => {
                invalid(format!("zero-volume prior range for {what}: [{lo}, {hi}]"))
            }
            _ => invalid(format!("non-finite prior for {what}")),
        }
    }

    fn lower(&self) -> f64 {
        match *self {
            Prior::Fixed(v) => v,
            Prior::Uniform([lo, _]) => lo,
        }
    }

    fn upper(&self) -> f64 {
        match *self {
            Prior::Fixed(v) => v,
            Prior::Uniform([_, hi]) => hi,
        }
    }

    fn center(&self) -> f64 {
        0.5 * (self.lower() + self.upper())
    }

    pub fn is_free(&self) -> bool {
        matches!(self, Prior::Uniform(_))
    }
}

/// Priors for one hotspot. Leaving `v` unset makes the hotspot circular
/// (`v = u`, `phi = 0`); an unset `phi` on an elliptical hotspot means 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotPrior {
    pub label: String,
    #[serde(rename = "A")]
    pub amplitude: Prior,
    pub x: Prior,
    pub y: Prior,
    pub u: Prior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Prior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Prior>,
    pub s: Prior,
}

impl HotspotPrior {
    pub fn is_circular(&self) -> bool {
        self.v.is_none()
    }

    /// Position seed box `([x_lo, x_hi], [y_lo, y_hi])`.
    pub fn seed_box(&self) -> ([f64; 2], [f64; 2]) {
        ([self.x.lower(), self.x.upper()], [self.y.lower(), self.y.upper()])
    }

    /// All parameters pinned to the values of `h`.
    pub fn fixed_at(label: impl Into<String>, h: &HotspotParams, circular: bool) -> Self {
        Self {
            label: label.into(),
            amplitude: Prior::Fixed(h.amplitude),
            x: Prior::Fixed(h.x),
            y: Prior::Fixed(h.y),
            u: Prior::Fixed(h.u),
            v: if circular { None } else { Some(Prior::Fixed(h.v)) },
            phi: if circular { None } else { Some(Prior::Fixed(h.phi)) },
            s: Prior::Fixed(h.s),
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.fields().iter().all(|(_, p)| !p.is_free())
    }

    fn fields(&self) -> Vec<(HotspotField, Prior)> {
        let mut out = vec![
            (HotspotField::Amplitude, self.amplitude),
            (HotspotField::X, self.x),
            (HotspotField::Y, self.y),
            (HotspotField::U, self.u),
        ];
        if let Some(v) = self.v {
            out.push((HotspotField::V, v));
            out.push((HotspotField::Phi, self.phi.unwrap_or(Prior::Fixed(0.0))));
        }
        out.push((HotspotField::S, self.s));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub hotspots: Vec<HotspotPrior>,
    pub background_n_max: u32,
    /// One prior per Zernike term, ordered as [`zernike::indices`].
    pub background: Vec<Prior>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HotspotField {
    #[serde(rename = "A")]
    Amplitude,
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "u")]
    U,
    #[serde(rename = "v")]
    V,
    #[serde(rename = "phi")]
    Phi,
    #[serde(rename = "s")]
    S,
}

impl HotspotField {
    pub const ALL: [HotspotField; 7] = [
        HotspotField::Amplitude,
        HotspotField::X,
        HotspotField::Y,
        HotspotField::U,
        HotspotField::V,
        HotspotField::Phi,
        HotspotField::S,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            HotspotField::Amplitude => "A",
            HotspotField::X => "x",
            HotspotField::Y => "y",
            HotspotField::U => "u",
            HotspotField::V => "v",
            HotspotField::Phi => "phi",
            HotspotField::S => "s",
        }
    }

    pub fn get(self, h: &HotspotParams) -> f64 {
        match self {
            HotspotField::Amplitude => h.amplitude,
            HotspotField::X => h.x,
            HotspotField::Y => h.y,
            HotspotField::U => h.u,
            HotspotField::V => h.v,
            HotspotField::Phi => h.phi,
            HotspotField::S => h.s,
        }
    }

    pub fn set(self, h: &mut HotspotParams, value: f64) {
        match self {
            HotspotField::Amplitude => h.amplitude = value,
            HotspotField::X => h.x = value,
            HotspotField::Y => h.y = value,
            HotspotField::U => h.u = value,
            HotspotField::V => h.v = value,
            HotspotField::Phi => h.phi = value,
            HotspotField::S => h.s = value,
        }
    }
}

/// Identity of one scalar model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Hotspot { index: usize, field: HotspotField },
    Background { term: usize },
}

impl ParamId {
    pub fn get(self, p: &ParameterVector) -> f64 {
        match self {
            ParamId::Hotspot { index, field } => field.get(&p.hotspots[index]),
            ParamId::Background { term } => p.background.coefficients()[term],
        }
    }

    pub fn set(self, p: &mut ParameterVector, value: f64) {
        match self {
            ParamId::Hotspot { index, field } => field.set(&mut p.hotspots[index], value),
            ParamId::Background { term } => p.background.coefficients_mut()[term] = value,
        }
    }

    /// Every scalar of a parameter vector with `n_hotspots` hotspots.
    pub fn all(n_hotspots: usize, n_max: u32) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = (0..n_hotspots)
            .flat_map(|index| HotspotField::ALL.iter().map(move |&field| ParamId::Hotspot { index, field }))
            .collect();
        out.extend((0..zernike::term_count(n_max)).map(|term| ParamId::Background { term }));
        out
    }

    /// Column name, e.g. `H1.x` or `C_2_0`.
    pub fn name(self, labels: &[String], n_max: u32) -> String {
        match self {
            ParamId::Hotspot { index, field } => {
                let label = labels.get(index).cloned().unwrap_or_else(|| format!("h{index}"));
                format!("{label}.{}", field.symbol())
            }
            ParamId::Background { term } => zernike::indices(n_max)
                .get(term)
                .map_or_else(|| format!("C_{term}"), |idx| format!("C_{}_{}", idx.n, idx.m)),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Hotspot { index, field } => write!(f, "h{index}.{}", field.symbol()),
            ParamId::Background { term } => write!(f, "C[{term}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeParam {
    pub id: ParamId,
    pub lo: f64,
    pub hi: f64,
}

impl PriorConfig {
    pub fn validate(&self, fov_radius: f64) -> Result<()> {
        if self.background.len() != zernike::term_count(self.background_n_max) {
            return invalid(format!(
                "background n_max={} needs {} priors, got {}",
                self.background_n_max,
                zernike::term_count(self.background_n_max),
                self.background.len()
            ));
        }
        for (k, p) in self.background.iter().enumerate() {
            p.validate(&format!("background term {k}"))?;
        }
        for h in &self.hotspots {
            for (field, p) in h.fields() {
                p.validate(&format!("{}.{}", h.label, field.symbol()))?;
                let positive = matches!(field, HotspotField::U | HotspotField::V | HotspotField::S);
                if positive && p.lower() <= 0.0 {
                    return invalid(format!("{}.{} must be positive", h.label, field.symbol()));
                }
            }
            let ([x0, x1], [y0, y1]) = h.seed_box();
            let r2 = fov_radius * fov_radius;
            let corners = [(x0, y0), (x0, y1), (x1, y0), (x1, y1)];
            if corners.iter().any(|(x, y)| x * x + y * y > r2) {
                return invalid(format!("seed box of {} leaves the FOV disk", h.label));
            }
        }
        if self.free_params().is_empty() {
            return invalid("prior box has zero volume: no free parameters");
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.hotspots.iter().map(|h| h.label.clone()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.hotspots.iter().position(|h| h.label == label)
    }

    pub fn free_params(&self) -> Vec<FreeParam> {
        let mut out = Vec::new();
        for (index, h) in self.hotspots.iter().enumerate() {
            for (field, p) in h.fields() {
                if let Prior::Uniform([lo, hi]) = p {
                    out.push(FreeParam { id: ParamId::Hotspot { index, field }, lo, hi });
                }
            }
        }
        for (term, p) in self.background.iter().enumerate() {
            if let Prior::Uniform([lo, hi]) = *p {
                out.push(FreeParam { id: ParamId::Background { term }, lo, hi });
            }
        }
        out
    }

    /// Parameter vector with fixed values and box centers for free ones.
    pub fn template(&self) -> ParameterVector {
        let hotspots = self
            .hotspots
            .iter()
            .map(|h| {
                let u = h.u.center();
                HotspotParams {
                    amplitude: h.amplitude.center(),
                    x: h.x.center(),
                    y: h.y.center(),
                    u,
                    v: h.v.map_or(u, |v| v.center()),
                    phi: h.phi.map_or(0.0, |p| p.center()),
                    s: h.s.center(),
                }
            })
            .collect();
        let coeffs = self.background.iter().map(Prior::center).collect();
        let background = BackgroundCoeffs::new(self.background_n_max, coeffs)
            .expect("background prior count checked by validate");
        ParameterVector::new(hotspots, background)
    }

    /// Template with the free parameters replaced by `values`.
    pub fn apply(&self, template: &ParameterVector, free: &[FreeParam], values: &[f64]) -> ParameterVector {
        let mut p = template.clone();
        for (fp, &v) in free.iter().zip(values) {
            fp.id.set(&mut p, v);
        }
        for (h, prior) in p.hotspots.iter_mut().zip(&self.hotspots) {
            if prior.is_circular() {
                h.v = h.u;
                h.phi = 0.0;
            }
            *h = h.canonical();
        }
        p
    }

    /// True when every hotspot's seed box is disjoint from all others, which
    /// pins hotspot identity to its slot.
    pub fn slots_identified(&self) -> bool {
        let boxes: Vec<_> = self.hotspots.iter().map(HotspotPrior::seed_box).collect();
        for (k, a) in boxes.iter().enumerate() {
            for b in &boxes[k + 1..] {
                let x_overlap = a.0[0] <= b.0[1] && b.0[0] <= a.0[1];
                let y_overlap = a.1[0] <= b.1[1] && b.1[0] <= a.1[1];
                if x_overlap && y_overlap {
                    return false;
                }
            }
        }
        true
    }
}

/// `sum_k ((Y_k - Ytilde_k) / eps_k)^2` with errors taken from `measured`.
pub fn chi_square(simulated: &Sinogram, measured: &Sinogram) -> Result<f64> {
    if simulated.geometry != measured.geometry || simulated.counts.len() != measured.counts.len() {
        return Err(Error::ShapeMismatch("simulated and measured sinograms differ in shape".into()));
    }
    let errors = measured
        .errors
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("measured sinogram has no bin errors".into()))?;
    Ok(simulated
        .counts
        .iter()
        .zip(&measured.counts)
        .zip(errors)
        .map(|((s, m), e)| ((m - s) / e).powi(2))
        .sum())
}

/// `exp(-(chi2_j - chi2_min) / 2)`; the best member gets exactly 1. Weights
/// that would underflow are held at the smallest normal `f64`.
pub fn finalize_weights(chi2: &[f64]) -> Result<Vec<f64>> {
    if chi2.is_empty() {
        return invalid("cannot weight an empty chi-square list");
    }
    if chi2.iter().any(|c| !c.is_finite()) {
        return invalid("chi-square values must be finite");
    }
    let min = chi2.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(chi2.iter().map(|c| (-(c - min) / 2.0).exp().max(f64::MIN_POSITIVE)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub params: ParameterVector,
    pub chi2: f64,
    pub weight: f64,
    /// Sampling stage that produced the member.
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<EnsembleMember>,
    pub chi2_min: f64,
    pub seed: u64,
    pub stages: usize,
    pub priors: PriorConfig,
    pub grid: ImageGrid,
}

impl Ensemble {
    /// Builds an ensemble from scored parameter vectors and finalizes weights.
    pub fn from_scored(
        scored: Vec<(ParameterVector, f64)>,
        priors: PriorConfig,
        grid: ImageGrid,
        seed: u64,
        stages: usize,
    ) -> Result<Self> {
        let chi2: Vec<f64> = scored.iter().map(|(_, c)| *c).collect();
        let weights = finalize_weights(&chi2)?;
        let chi2_min = chi2.iter().copied().fold(f64::INFINITY, f64::min);
        let members = scored
            .into_iter()
            .zip(weights)
            .map(|((params, chi2), weight)| EnsembleMember { params, chi2, weight, stage: 0 })
            .collect();
        Ok(Self { members, chi2_min, seed, stages, priors, grid })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.priors.labels()
    }

    pub fn n_hotspots(&self) -> usize {
        self.priors.hotspots.len()
    }

    pub fn param_name(&self, id: ParamId) -> String {
        id.name(&self.labels(), self.priors.background_n_max)
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        ParamId::all(self.n_hotspots(), self.priors.background_n_max)
    }

    /// Recomputes weights from the stored chi-square values.
    pub fn refinalize(&mut self) -> Result<()> {
        let chi2: Vec<f64> = self.members.iter().map(|m| m.chi2).collect();
        let weights = finalize_weights(&chi2)?;
        self.chi2_min = chi2.iter().copied().fold(f64::INFINITY, f64::min);
        for (m, w) in self.members.iter_mut().zip(weights) {
            m.weight = w;
        }
        Ok(())
    }

    /// Adds `c` to every chi-square value and re-derives the weights.
    pub fn shift_chi2(&mut self, c: f64) -> Result<()> {
        for m in &mut self.members {
            m.chi2 += c;
        }
        self.refinalize()
    }

    /// Multiplies every weight by `factor`. The result no longer has a unit
    /// maximum weight; every derived quantity is normalized, so it is
    /// unaffected.
    pub fn scale_weights(&mut self, factor: f64) {
        for m in &mut self.members {
            m.weight *= factor;
        }
    }

    pub fn best(&self) -> Option<&EnsembleMember> {
        self.members.iter().min_by(|a, b| a.chi2.total_cmp(&b.chi2))
    }
}

/// Forward model specialized for repeated chi-square evaluation of models
/// that share fixed components.
///
/// Fully fixed hotspots and fixed background terms are projected once.
/// Free background terms reuse precomputed projections of single Zernike
/// polynomials (rendering is linear in the coefficients). Hotspots with a
/// free parameter are rendered only where their Fermi factor exceeds 1e-7
/// and projected through the per-pixel footprints of the system matrix.
pub struct ChiSquareModel<'a> {
    projector: &'a Projector,
    measured: Vec<f64>,
    inv_var: Vec<f64>,
    fixed: Vec<f64>,
    /// `(term, projection)` for each free background term.
    free_background: Vec<(usize, Vec<f64>)>,
    variable_hotspots: Vec<usize>,
}

impl<'a> ChiSquareModel<'a> {
    pub fn new(projector: &'a Projector, data: &Sinogram, priors: &PriorConfig) -> Result<Self> {
        if data.geometry != *projector.geometry() {
            return Err(Error::ShapeMismatch("data geometry differs from projector geometry".into()));
        }
        data.validate_counts()?;
        let errors = data
            .errors
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("measured sinogram has no bin errors".into()))?;
        let grid = *projector.grid();
        let template = priors.template();
        let n = data.counts.len();

        let mut fixed = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        let mut free_background = Vec::new();
        for (term, idx) in zernike::indices(priors.background_n_max).into_iter().enumerate() {
            let prior = priors.background[term];
            if let Prior::Fixed(0.0) = prior {
                continue;
            }
            let mut unit = BackgroundCoeffs::zeros(priors.background_n_max);
            unit.coefficients_mut()[term] = 1.0;
            let img = render_image(&ParameterVector::new(vec![], unit), &grid);
            projector.forward_into(&img.values, &mut scratch);
            match prior {
                Prior::Fixed(c) => {
                    for (f, s) in fixed.iter_mut().zip(&scratch) {
                        *f += c * s;
                    }
                }
                Prior::Uniform(_) => free_background.push((term, scratch.clone())),
            }
            log::trace!("projected background term {idx}");
        }

        let mut variable_hotspots = Vec::new();
        for (k, hp) in priors.hotspots.iter().enumerate() {
            if hp.is_fixed() {
                let only = ParameterVector::new(
                    vec![template.hotspots[k]],
                    BackgroundCoeffs::zeros(0),
                );
                let img = render_image(&only, &grid);
                projector.forward_into(&img.values, &mut scratch);
                for (f, s) in fixed.iter_mut().zip(&scratch) {
                    *f += s;
                }
            } else {
                variable_hotspots.push(k);
            }
        }

        Ok(Self {
            projector,
            measured: data.counts.clone(),
            inv_var: errors.iter().map(|e| 1.0 / (e * e)).collect(),
            fixed,
            free_background,
            variable_hotspots,
        })
    }

    /// Chi-square of `p`, whose fixed components must match the priors the
    /// model was built with. `sim` is scratch of sinogram length.
    pub fn chi2(&self, p: &ParameterVector, sim: &mut [f64]) -> f64 {
        sim.copy_from_slice(&self.fixed);
        for (term, proj) in &self.free_background {
            let c = p.background.coefficients()[*term];
            for (s, b) in sim.iter_mut().zip(proj) {
                *s += c * b;
            }
        }
        for &k in &self.variable_hotspots {
            self.add_hotspot(&p.hotspots[k], sim);
        }
        sim.iter()
            .zip(&self.measured)
            .zip(&self.inv_var)
            .map(|((s, m), w)| (m - s) * (m - s) * w)
            .sum()
    }

    fn add_hotspot(&self, h: &HotspotParams, sim: &mut [f64]) {
        if h.amplitude == 0.0 {
            return;
        }
        let grid = self.projector.grid();
        let reach = h.max_semi_axis() * (1.0 + h.s * WINDOW_Z_CUT);
        let ps = grid.pixel_size;
        let to_i = |x: f64| x / ps + grid.width_px as f64 / 2.0 - 0.5;
        let to_j = |y: f64| y / ps + grid.height_px as f64 / 2.0 - 0.5;
        let i0 = to_i(h.x - reach).floor().max(0.0) as usize;
        let i1 = (to_i(h.x + reach).ceil().min(grid.width_px as f64 - 1.0)).max(0.0) as usize;
        let j0 = to_j(h.y - reach).floor().max(0.0) as usize;
        let j1 = (to_j(h.y + reach).ceil().min(grid.height_px as f64 - 1.0)).max(0.0) as usize;
        let circular = h.u == h.v;
        let (sin_phi, cos_phi) = h.phi.sin_cos();
        let fov2 = grid.fov_radius * grid.fov_radius;
        for j in j0..=j1 {
            let y = grid.y_of(j);
            let dy = y - h.y;
            for i in i0..=i1 {
                let x = grid.x_of(i);
                if x * x + y * y > fov2 {
                    continue;
                }
                let dx = x - h.x;
                let r = (dx * dx + dy * dy).sqrt();
                let radius = if circular || r == 0.0 {
                    h.u
                } else {
                    let dxp = dx * cos_phi + dy * sin_phi;
                    let dyp = -dx * sin_phi + dy * cos_phi;
                    let a = h.v * dxp;
                    let b = h.u * dyp;
                    h.u * h.v * r / (a * a + b * b).sqrt()
                };
                let z = (r - radius) / (h.s * radius);
                if z > WINDOW_Z_CUT {
                    continue;
                }
                let value = h.amplitude * fermi(z);
                let (bins, weights) = self.projector.pixel_footprint(j * grid.width_px + i);
                for (&b, &w) in bins.iter().zip(weights) {
                    sim[b as usize] += value * w;
                }
            }
        }
    }

    pub fn sinogram_len(&self) -> usize {
        self.measured.len()
    }
}

/// Stage sizes: `n` split evenly, remainder to the earliest stages.
pub fn stage_sizes(n: usize, stages: usize) -> Vec<usize> {
    (0..stages).map(|k| n / stages + usize::from(k < n % stages)).collect()
}

pub fn sample_ensemble(
    data: &Sinogram,
    grid: &ImageGrid,
    priors: &PriorConfig,
    n: usize,
    seed: u64,
    stages: usize,
) -> Result<Ensemble> {
    let projector = Projector::new(*grid, data.geometry)?;
    sample_ensemble_with(&projector, data, priors, n, seed, stages)
}

/// [`sample_ensemble`] reusing an existing projector.
pub fn sample_ensemble_with(
    projector: &Projector,
    data: &Sinogram,
    priors: &PriorConfig,
    n: usize,
    seed: u64,
    stages: usize,
) -> Result<Ensemble> {
    if n == 0 {
        return invalid("ensemble size must be at least 1");
    }
    if stages == 0 {
        return invalid("at least one sampling stage is required");
    }
    let grid = *projector.grid();
    priors.validate(grid.fov_radius)?;
    let model = ChiSquareModel::new(projector, data, priors)?;
    let free = priors.free_params();
    let template = priors.template();
    let canonical_order = !priors.slots_identified();
    let prior_box: Vec<[f64; 2]> = free.iter().map(|f| [f.lo, f.hi]).collect();
    let mut bounds = prior_box.clone();

    let mut draws: Vec<f64> = Vec::with_capacity(n * free.len());
    let mut scored: Vec<(ParameterVector, f64, usize)> = Vec::with_capacity(n);
    for (stage, size) in stage_sizes(n, stages).into_iter().enumerate() {
        if stage > 0 && !scored.is_empty() {
            let chi2: Vec<f64> = scored.iter().map(|m| m.1).collect();
            bounds = refine_box(&draws, &chi2, free.len(), &prior_box);
        }
        if size == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("stage/{stage}")));
        let start = draws.len();
        for _ in 0..size {
            for &[lo, hi] in &bounds {
                draws.push(lo + (hi - lo) * rng.random::<f64>());
            }
        }
        let stage_draws = &draws[start..];
        let width = free.len();
        let results: Vec<(ParameterVector, f64)> = stage_draws
            .par_chunks(width.max(1))
            .map_init(
                || vec![0.0; model.sinogram_len()],
                |sim, values| {
                    let mut p = priors.apply(&template, &free, values);
                    let chi2 = model.chi2(&p, sim);
                    if canonical_order {
                        p.canonicalize();
                    }
                    (p, chi2)
                },
            )
            .collect();
        scored.extend(results.into_iter().map(|(p, c)| (p, c, stage)));
    }

    let chi2: Vec<f64> = scored.iter().map(|m| m.1).collect();
    let weights = finalize_weights(&chi2)?;
    let chi2_min = chi2.iter().copied().fold(f64::INFINITY, f64::min);
    let members = scored
        .into_iter()
        .zip(weights)
        .map(|((params, chi2, stage), weight)| EnsembleMember { params, chi2, weight, stage })
        .collect();
    Ok(Ensemble { members, chi2_min, seed, stages, priors: priors.clone(), grid })
}

/// Bounding box of the members with weight >= 0.1 (or the best few),
/// widened by 25% and clipped to the prior box.
pub fn refine_box(draws: &[f64], chi2: &[f64], width: usize, prior_box: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let min = chi2.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = -2.0 * REFINE_WEIGHT_THRESHOLD.ln();
    let mut chosen: Vec<usize> = (0..chi2.len()).filter(|&k| chi2[k] - min <= cut).collect();
    let k_min = (chi2.len() / 1000).max(10).min(chi2.len());
    if chosen.len() < k_min {
        let mut order: Vec<usize> = (0..chi2.len()).collect();
        order.sort_by(|&a, &b| chi2[a].total_cmp(&chi2[b]).then(a.cmp(&b)));
        order.truncate(k_min);
        chosen = order;
    }
    (0..width)
        .map(|d| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &k in &chosen {
                let v = draws[k * width + d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let [p_lo, p_hi] = prior_box[d];
            let center = 0.5 * (lo + hi);
            let mut half = 0.5 * (hi - lo) * (1.0 + REFINE_EXPANSION);
            if half <= 1e-9 * (p_hi - p_lo) {
                half = 1e-3 * (p_hi - p_lo);
            }
            [(center - half).max(p_lo), (center + half).min(p_hi)]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_model::HotspotParams;
    use crate::projector::{AcquisitionGeometry, Sinogram};
    use proptest::prelude::*;
    use rand::Rng;

    fn geom1() -> AcquisitionGeometry {
        AcquisitionGeometry::new(1, 360.0, 1, 1.0).unwrap()
    }

    #[test]
    fn chi_square_examples() {
        let g = geom1();
        let measured = Sinogram::with_errors(g, vec![100.0], vec![10.0]).unwrap();
        let same = Sinogram::new(g, vec![100.0]).unwrap();
        assert_eq!(chi_square(&same, &measured).unwrap(), 0.0);
        let off = Sinogram::new(g, vec![110.0]).unwrap();
        assert_eq!(chi_square(&off, &measured).unwrap(), 1.0);

        let g2 = AcquisitionGeometry::new(1, 360.0, 2, 1.0).unwrap();
        let measured = Sinogram::with_errors(g2, vec![50.0, 20.0], vec![5.0, 2.0]).unwrap();
        let sim = Sinogram::new(g2, vec![55.0, 24.0]).unwrap();
        assert_eq!(chi_square(&sim, &measured).unwrap(), 5.0);
    }

    #[test]
    fn chi_square_rejects_mismatch() {
        let measured = Sinogram::with_errors(geom1(), vec![1.0], vec![1.0]).unwrap();
        let g2 = AcquisitionGeometry::new(1, 360.0, 2, 1.0).unwrap();
        assert!(chi_square(&Sinogram::zeros(g2), &measured).is_err());
        assert!(chi_square(&measured, &Sinogram::zeros(geom1())).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = finalize_weights(&[10.0, 12.0, 10.0]).unwrap();
        assert_eq!(w[0], 1.0);
        assert_eq!(w[2], 1.0);
        assert!((w[1] - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert!(finalize_weights(&[]).is_err());
        assert!(finalize_weights(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn weights_shift_invariant_and_faithful(
            // Dyadic values so that adding an integer shift is exact.
            raw in prop::collection::vec(0u32..(1 << 20), 1..50),
            shift in 0u32..5000,
        ) {
            let chi2: Vec<f64> = raw.iter().map(|&r| r as f64 / 1024.0).collect();
            let shifted: Vec<f64> = chi2.iter().map(|c| c + shift as f64).collect();
            let w = finalize_weights(&chi2).unwrap();
            prop_assert_eq!(&w, &finalize_weights(&shifted).unwrap());
            prop_assert!(w.iter().any(|&x| x == 1.0));
            let best = chi2.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(w[best], 1.0);
            for a in 0..chi2.len() {
                for b in 0..chi2.len() {
                    let expected = (-(chi2[a] - chi2[b]) / 2.0).exp();
                    if w[b] > 1e-200 && expected.is_normal() {
                        prop_assert!(((w[a] / w[b]) / expected - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn stage_budgets() {
        assert_eq!(stage_sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(stage_sizes(1, 3), vec![1, 0, 0]);
        assert_eq!(stage_sizes(9, 3).iter().sum::<usize>(), 9);
    }

    fn toy_priors(a: Prior) -> PriorConfig {
        PriorConfig {
            hotspots: vec![HotspotPrior {
                label: "H".into(),
                amplitude: a,
                x: Prior::Fixed(1.0),
                y: Prior::Fixed(-2.0),
                u: Prior::Fixed(3.0),
                v: None,
                phi: None,
                s: Prior::Fixed(0.1),
            }],
            background_n_max: 0,
            background: vec![Prior::Fixed(0.0)],
        }
    }

    #[test]
    fn prior_validation() {
        let fov = 15.0;
        assert!(toy_priors(Prior::uniform(0.0, 10.0)).validate(fov).is_ok());
        // Zero-volume box.
        assert!(toy_priors(Prior::Fixed(2.0)).validate(fov).is_err());
        assert!(toy_priors(Prior::uniform(2.0, 2.0)).validate(fov).is_err());
        let mut p = toy_priors(Prior::uniform(0.0, 1.0));
        p.hotspots[0].s = Prior::uniform(0.0, 0.2);
        assert!(p.validate(fov).is_err());
        let mut p = toy_priors(Prior::uniform(0.0, 1.0));
        p.hotspots[0].x = Prior::uniform(10.0, 14.9);
        p.hotspots[0].y = Prior::uniform(10.0, 12.0);
        assert!(p.validate(fov).is_err());
        let mut p = toy_priors(Prior::uniform(0.0, 1.0));
        p.background = vec![];
        assert!(p.validate(fov).is_err());
    }

    #[test]
    fn prior_json_shape() {
        let p = toy_priors(Prior::uniform(0.0, 10.0));
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"A\":{\"uniform\":[0.0,10.0]}"));
        assert!(s.contains("\"x\":{\"fixed\":1.0}"));
        assert_eq!(serde_json::from_str::<PriorConfig>(&s).unwrap(), p);
    }

    fn small_setup() -> (ImageGrid, AcquisitionGeometry) {
        (
            ImageGrid::new(40, 40, 0.5, 10.0).unwrap(),
            AcquisitionGeometry::new(8, 180.0, 48, 0.5).unwrap(),
        )
    }

    #[test]
    fn fast_chi2_matches_full_projection() {
        let (grid, geom) = small_setup();
        let projector = Projector::new(grid, geom).unwrap();
        let truth = ParameterVector::new(
            vec![
                HotspotParams { amplitude: 5.0, x: 1.5, y: -2.0, u: 2.0, v: 1.2, phi: 0.7, s: 0.15 },
                HotspotParams::circular(-3.0, -3.0, 3.0, 1.5, 0.05),
            ],
            BackgroundCoeffs::new(1, vec![2.0, 0.3, -0.2]).unwrap(),
        );
        let data = projector.forward(&render_image(&truth, &grid)).unwrap().with_poisson_errors();
        let priors = PriorConfig {
            hotspots: vec![
                HotspotPrior {
                    label: "a".into(),
                    amplitude: Prior::uniform(0.0, 10.0),
                    x: Prior::uniform(0.5, 2.5),
                    y: Prior::uniform(-3.0, -1.0),
                    u: Prior::uniform(1.0, 3.0),
                    v: Some(Prior::uniform(1.0, 3.0)),
                    phi: Some(Prior::uniform(0.0, 3.0)),
                    s: Prior::uniform(0.02, 0.3),
                },
                HotspotPrior::fixed_at("b", &truth.hotspots[1], true),
            ],
            background_n_max: 1,
            background: vec![Prior::uniform(1.0, 3.0), Prior::Fixed(0.3), Prior::uniform(-1.0, 1.0)],
        };
        let model = ChiSquareModel::new(&projector, &data, &priors).unwrap();
        let mut sim = vec![0.0; geom.len()];
        let free = priors.free_params();
        let template = priors.template();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let values: Vec<f64> = free.iter().map(|f| rng.random_range(f.lo..f.hi)).collect();
            let p = priors.apply(&template, &free, &values);
            let fast = model.chi2(&p, &mut sim);
            let full = chi_square(&projector.forward(&render_image(&p, &grid)).unwrap(), &data).unwrap();
            assert!((fast - full).abs() <= 1e-6 * full.max(1.0), "{fast} vs {full}");
        }
        let at_truth = model.chi2(&truth, &mut sim);
        assert!(at_truth < 1e-6, "{at_truth}");
    }

    #[test]
    fn sampler_contract() {
        let (grid, geom) = small_setup();
        let truth = ParameterVector::new(
            vec![HotspotParams::circular(4.0, 1.0, -2.0, 3.0, 0.1)],
            BackgroundCoeffs::zeros(0),
        );
        let data = Projector::new(grid, geom)
            .unwrap()
            .forward(&render_image(&truth, &grid))
            .unwrap()
            .with_poisson_errors();
        let mut priors = toy_priors(Prior::uniform(0.0, 10.0));
        priors.hotspots[0].x = Prior::uniform(0.0, 2.0);

        let a = sample_ensemble(&data, &grid, &priors, 301, 42, 3).unwrap();
        let b = sample_ensemble(&data, &grid, &priors, 301, 42, 3).unwrap();
        assert_eq!(a.len(), 301);
        assert_eq!(a, b);
        let c = sample_ensemble(&data, &grid, &priors, 301, 43, 3).unwrap();
        assert_ne!(a, c);

        let best = a.best().unwrap();
        assert_eq!(best.weight, 1.0);
        assert_eq!(best.chi2, a.chi2_min);
        let heaviest = a.members.iter().max_by(|x, y| x.weight.total_cmp(&y.weight)).unwrap();
        assert_eq!(heaviest.chi2, a.chi2_min);
        for m in &a.members {
            let h = &m.params.hotspots[0];
            assert!((0.0..=10.0).contains(&h.amplitude));
            assert!((0.0..=2.0).contains(&h.x));
            assert_eq!(h.y, -2.0);
            assert!(m.weight > 0.0 && m.weight <= 1.0);
        }
        // Later stages concentrate around the truth.
        let last: Vec<f64> = a.members.iter().filter(|m| m.stage == 2).map(|m| m.params.hotspots[0].amplitude).collect();
        let spread = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - last.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 5.0);

        assert!(sample_ensemble(&data, &grid, &priors, 0, 1, 3).is_err());
        assert!(sample_ensemble(&data, &grid, &priors, 10, 1, 0).is_err());
        assert!(sample_ensemble(&data, &grid, &toy_priors(Prior::Fixed(1.0)), 10, 1, 1).is_err());
    }

    #[test]
    fn overlapping_seed_boxes_use_canonical_order() {
        let (grid, geom) = small_setup();
        let data = Sinogram::new(geom, vec![1.0; geom.len()]).unwrap().with_poisson_errors();
        let free = |label: &str| HotspotPrior {
            label: label.into(),
            amplitude: Prior::uniform(0.0, 1.0),
            x: Prior::uniform(-3.0, 3.0),
            y: Prior::uniform(-3.0, 3.0),
            u: Prior::Fixed(1.0),
            v: None,
            phi: None,
            s: Prior::Fixed(0.1),
        };
        let priors = PriorConfig {
            hotspots: vec![free("a"), free("b")],
            background_n_max: 0,
            background: vec![Prior::Fixed(0.0)],
        };
        assert!(!priors.slots_identified());
        let e = sample_ensemble(&data, &grid, &priors, 200, 3, 2).unwrap();
        for m in &e.members {
            let h = &m.params.hotspots;
            assert!(h[0].x < h[1].x || (h[0].x == h[1].x && h[0].y <= h[1].y));
        }
    }

    #[test]
    fn refinement_stays_inside_prior_box() {
        let prior_box = vec![[0.0, 1.0], [-5.0, 5.0]];
        let draws = vec![0.0, -5.0, 1.0, 5.0, 0.5, 0.0];
        let chi2 = vec![0.0, 0.1, 0.2];
        let b = refine_box(&draws, &chi2, 2, &prior_box);
        assert_eq!(b, prior_box);
        let draws = vec![0.4, 1.0, 0.6, 2.0, 0.9, -4.0];
        let chi2 = vec![0.0, 1.0, 50.0];
        let b = refine_box(&draws, &chi2, 2, &prior_box);
        // Fewer than ten qualify, so all three members (the best ten) are used.
        assert!((b[0][0] - 0.3375).abs() < 1e-12 && (b[0][1] - 0.9625).abs() < 1e-12);
        assert!((b[1][0] + 4.75).abs() < 1e-12 && (b[1][1] - 2.75).abs() < 1e-12);
        let b = refine_box(&[0.0, 0.0, 0.99, 4.9], &[0.0, 0.5], 2, &prior_box);
        assert_eq!(b[0][1], 1.0);
        assert_eq!(b[1][1], 5.0);
    }
}
