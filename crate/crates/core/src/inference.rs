//! Marginal distributions and point estimates from a weighted ensemble.

use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, ParamId};
use crate::error::{invalid, Result};
use crate::image_model::{render_image, Image, ImageGrid, ParameterVector};

pub const DEFAULT_PDF_BINS: usize = 100;
/// Members whose weight is at most this fraction of the largest weight are
/// left out of PDF supports.
pub const WEIGHT_FLOOR: f64 = 1e-12;
/// Total widening of a PDF support beyond the sampled range.
pub const SUPPORT_PADDING: f64 = 0.05;

/// Histogram of weighted values with equal-width bins on `[lo, lo + n*bin_width]`.
///
/// `mass` sums to 1. `centroid[b]` is the weighted mean of the values that
/// fell into bin `b` (the bin center for empty bins).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pdf {
    pub parameter: String,
    pub lo: f64,
    pub bin_width: f64,
    pub mass: Vec<f64>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub mean: f64,
    pub sigma: f64,
    /// Center of the heaviest bin.
    pub mode: f64,
}

impl Pdf {
    /// Support is the range of the values with non-negligible weight,
    /// widened by 5%. A single distinct value gets a tiny symmetric support.
    pub fn from_weighted(parameter: impl Into<String>, values: &[f64], weights: &[f64], n_bins: usize) -> Result<Self> {
        let (lo, hi) = support(values, weights)?;
        Self::with_range(parameter, values, weights, lo, hi, n_bins)
    }

    /// Histogram on a caller-chosen range; values outside it are dropped.
    pub fn with_range(
        parameter: impl Into<String>,
        values: &[f64],
        weights: &[f64],
        lo: f64,
        hi: f64,
        n_bins: usize,
    ) -> Result<Self> {
        if n_bins < 2 {
            return invalid("a PDF needs at least two bins");
        }
        if values.len() != weights.len() {
            return invalid("values and weights differ in length");
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return invalid(format!("invalid PDF range [{lo}, {hi}]"));
        }
        let bin_width = (hi - lo) / n_bins as f64;
        let floor = max_weight(weights) * WEIGHT_FLOOR;
        let mut mass = vec![0.0; n_bins];
        let mut reference = vec![f64::NAN; n_bins];
        let mut offset = vec![0.0; n_bins];
        let mut total = 0.0;
        for (&v, &w) in values.iter().zip(weights) {
            if !(w > floor) || v < lo || v > hi {
                continue;
            }
            let b = (((v - lo) / bin_width) as usize).min(n_bins - 1);
            if reference[b].is_nan() {
                reference[b] = v;
            }
            mass[b] += w;
            offset[b] += w * (v - reference[b]);
            total += w;
        }
        if !(total > 0.0) {
            return invalid("no weighted samples inside the PDF range");
        }
        let centroid = (0..n_bins)
            .map(|b| {
                if mass[b] > 0.0 {
                    reference[b] + offset[b] / mass[b]
                } else {
                    lo + (b as f64 + 0.5) * bin_width
                }
            })
            .collect();
        for m in &mut mass {
            *m /= total;
        }
        Ok(Self { parameter: parameter.into(), lo, bin_width, mass, centroid })
    }

    pub fn n_bins(&self) -> usize {
        self.mass.len()
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.bin_width * self.n_bins() as f64
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        self.lo + (b as f64 + 0.5) * self.bin_width
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n_bins()).map(|b| self.lo + b as f64 * self.bin_width).collect()
    }

    /// Probability density per bin.
    pub fn density(&self) -> Vec<f64> {
        self.mass.iter().map(|m| m / self.bin_width).collect()
    }

    pub fn same_binning(&self, other: &Pdf) -> bool {
        self.lo == other.lo && self.bin_width == other.bin_width && self.n_bins() == other.n_bins()
    }

    /// Value below which a fraction `q` of the mass lies, interpolating
    /// linearly inside bins.
    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let mut acc = 0.0;
        for (b, &m) in self.mass.iter().enumerate() {
            if m > 0.0 && acc + m >= q {
                let frac = ((q - acc) / m).clamp(0.0, 1.0);
                return self.lo + (b as f64 + frac) * self.bin_width;
            }
            acc += m;
        }
        self.hi()
    }

    /// Mass above `x`, treating mass as uniform within each bin.
    pub fn mass_above(&self, x: f64) -> f64 {
        self.mass
            .iter()
            .enumerate()
            .map(|(b, &m)| {
                let left = self.lo + b as f64 * self.bin_width;
                let frac = ((left + self.bin_width - x) / self.bin_width).clamp(0.0, 1.0);
                m * frac
            })
            .sum()
    }
}

fn max_weight(weights: &[f64]) -> f64 {
    weights.iter().copied().fold(0.0, f64::max)
}

fn support(values: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if values.len() != weights.len() {
        return invalid("values and weights differ in length");
    }
    let floor = max_weight(weights) * WEIGHT_FLOOR;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&v, &w) in values.iter().zip(weights) {
        if w > floor {
            if !v.is_finite() {
                return invalid("non-finite sample value");
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return invalid("no samples with positive weight");
    }
    if lo == hi {
        let pad = lo.abs().max(1.0) * 1e-9;
        return Ok((lo - pad, hi + pad));
    }
    let pad = 0.5 * SUPPORT_PADDING * (hi - lo);
    Ok((lo - pad, hi + pad))
}

pub fn member_weights(e: &Ensemble) -> Vec<f64> {
    e.members.iter().map(|m| m.weight).collect()
}

pub fn param_values(e: &Ensemble, id: ParamId) -> Vec<f64> {
    e.members.iter().map(|m| id.get(&m.params)).collect()
}

pub fn marginal_pdf(e: &Ensemble, id: ParamId, n_bins: usize) -> Result<Pdf> {
    if e.is_empty() {
        return invalid("empty ensemble");
    }
    Pdf::from_weighted(e.param_name(id), &param_values(e, id), &member_weights(e), n_bins)
}

/// Mean and standard deviation of the histogram, using bin centroids.
pub fn summarize(pdf: &Pdf) -> ParameterSummary {
    let mean: f64 = pdf.centroid.iter().zip(&pdf.mass).map(|(c, m)| c * m).sum();
    let var: f64 = pdf.centroid.iter().zip(&pdf.mass).map(|(c, m)| (c - mean).powi(2) * m).sum();
    let heaviest = pdf
        .mass
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(b, _)| b);
    ParameterSummary { mean, sigma: var.sqrt(), mode: pdf.bin_center(heaviest) }
}

/// Parameter vector of marginal PDF means.
pub fn rise_parameters(e: &Ensemble, n_bins: usize) -> Result<ParameterVector> {
    let first = e.members.first().ok_or_else(|| crate::Error::InvalidInput("empty ensemble".into()))?;
    let mut p = first.params.clone();
    for id in e.all_params() {
        id.set(&mut p, summarize(&marginal_pdf(e, id, n_bins)?).mean);
    }
    Ok(p)
}

/// Model image rendered at the marginal PDF means.
pub fn rise_image(e: &Ensemble, grid: &ImageGrid) -> Result<Image> {
    Ok(render_image(&rise_parameters(e, DEFAULT_PDF_BINS)?, grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

pub fn position_scatter(e: &Ensemble, hotspot: usize) -> Result<Vec<ScatterPoint>> {
    if hotspot >= e.n_hotspots() {
        return invalid(format!("hotspot index {hotspot} out of range"));
    }
    Ok(e.members
        .iter()
        .map(|m| {
            let h = &m.params.hotspots[hotspot];
            ScatterPoint { x: h.x, y: h.y, weight: m.weight }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{HotspotField, HotspotPrior, Prior, PriorConfig};
    use crate::image_model::{BackgroundCoeffs, HotspotParams};
    use proptest::prelude::*;

    fn priors() -> PriorConfig {
        PriorConfig {
            hotspots: vec![HotspotPrior {
                label: "H".into(),
                amplitude: Prior::uniform(0.0, 10.0),
                x: Prior::uniform(-2.0, 2.0),
                y: Prior::uniform(-2.0, 2.0),
                u: Prior::Fixed(2.0),
                v: None,
                phi: None,
                s: Prior::Fixed(0.1),
            }],
            background_n_max: 0,
            background: vec![Prior::uniform(0.0, 2.0)],
        }
    }

    fn grid() -> ImageGrid {
        ImageGrid::new(32, 32, 0.5, 8.0).unwrap()
    }

    fn member(a: f64, x: f64, y: f64, c: f64) -> ParameterVector {
        ParameterVector::new(
            vec![HotspotParams::circular(a, x, y, 2.0, 0.1)],
            BackgroundCoeffs::constant(0, c),
        )
    }

    fn ensemble(scored: Vec<(ParameterVector, f64)>) -> Ensemble {
        Ensemble::from_scored(scored, priors(), grid(), 0, 1).unwrap()
    }

    const A: ParamId = ParamId::Hotspot { index: 0, field: HotspotField::Amplitude };

    #[test]
    fn two_member_closed_form() {
        let e = ensemble(vec![(member(3.0, 0.0, 0.0, 1.0), 0.0), (member(5.0, 0.0, 0.0, 1.0), 2.0)]);
        let w = (-1.0f64).exp();
        let expected = (3.0 + 5.0 * w) / (1.0 + w);
        let s = summarize(&marginal_pdf(&e, A, 100).unwrap());
        assert!((s.mean - expected).abs() <= 1e-12, "{} vs {expected}", s.mean);
        let var = (1.0 * (3.0 - expected).powi(2) + w * (5.0 - expected).powi(2)) / (1.0 + w);
        assert!((s.sigma - var.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn identical_members_reproduce_the_model() {
        let p = ParameterVector::new(
            vec![HotspotParams::circular(4.3, 0.7, -1.1, 2.0, 0.1)],
            BackgroundCoeffs::constant(0, 1.3),
        );
        let e = ensemble(vec![(p.clone(), 5.0); 7]);
        let img = rise_image(&e, &grid()).unwrap();
        assert_eq!(img, render_image(&p, &grid()));
    }

    #[test]
    fn support_rules() {
        let pdf = Pdf::from_weighted("a", &[0.0, 10.0, 100.0], &[1.0, 1.0, 1e-13], 10).unwrap();
        assert!((pdf.lo + 0.25).abs() < 1e-12);
        assert!((pdf.hi() - 10.25).abs() < 1e-12);
        assert!((pdf.mass.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(pdf.mass[0], 0.5);
        assert_eq!(pdf.centroid[0], 0.0);
        assert!(Pdf::from_weighted("a", &[], &[], 10).is_err());
        assert!(Pdf::from_weighted("a", &[1.0], &[1.0], 1).is_err());
        assert!(Pdf::from_weighted("a", &[1.0], &[0.0], 5).is_err());
    }

    #[test]
    fn pdf_and_summary_examples() {
        let pdf = Pdf::from_weighted("a", &[0.0, 5.0, 10.0], &[1.0; 3], 3).unwrap();
        for m in &pdf.mass {
            assert!((m - 1.0 / 3.0).abs() < 1e-15);
        }
        let two = Pdf::from_weighted("a", &[2.0, 6.0], &[0.5, 0.5], 10).unwrap();
        assert_eq!(summarize(&two).mean, 4.0);
        let point = Pdf::from_weighted("a", &[1.5; 4], &[1.0, 0.5, 0.2, 0.1], 10).unwrap();
        let s = summarize(&point);
        assert_eq!((s.mean, s.sigma), (1.5, 0.0));
    }

    #[test]
    fn gaussian_weights_recover_sigma() {
        let sigma = 0.7;
        let n = 20_000;
        let scored = (0..n)
            .map(|k| {
                let a = 5.0 + 6.0 * sigma * ((k as f64 + 0.5) / n as f64 - 0.5) * 2.0;
                (member(a, 0.0, 0.0, 1.0), ((a - 5.0) / sigma).powi(2))
            })
            .collect();
        let e = ensemble(scored);
        let s = summarize(&marginal_pdf(&e, A, 100).unwrap());
        assert!((s.sigma / sigma - 1.0).abs() < 0.05, "{}", s.sigma);
        assert!((s.mean - 5.0).abs() < 1e-3);
    }

    #[test]
    fn scatter_centroid_matches_pdf_means() {
        let rows: Vec<_> = (0..500)
            .map(|k| {
                let t = k as f64;
                ((t * 0.37).sin() + 5.0, (t * 0.11).cos(), (t * 0.23).sin(), 1.0, (t * 0.05).sin().abs() * 6.0)
            })
            .collect();
        let e = build(&rows);
        let pts = position_scatter(&e, 0).unwrap();
        assert_eq!(pts.len(), e.len());
        let w: f64 = pts.iter().map(|p| p.weight).sum();
        let cx = pts.iter().map(|p| p.x * p.weight).sum::<f64>() / w;
        let cy = pts.iter().map(|p| p.y * p.weight).sum::<f64>() / w;
        let mx = summarize(&marginal_pdf(&e, ParamId::Hotspot { index: 0, field: HotspotField::X }, 100).unwrap()).mean;
        let my = summarize(&marginal_pdf(&e, ParamId::Hotspot { index: 0, field: HotspotField::Y }, 100).unwrap()).mean;
        assert!((cx - mx).abs() <= 1e-9 && (cy - my).abs() <= 1e-9);
        let single = build(&rows[..1]);
        assert_eq!(position_scatter(&single, 0).unwrap()[0].weight, 1.0);
    }

    #[test]
    fn quantiles() {
        let pdf = Pdf::with_range("a", &[0.5, 1.5, 2.5, 3.5], &[1.0; 4], 0.0, 4.0, 4).unwrap();
        assert!((pdf.quantile(0.5) - 2.0).abs() < 1e-12);
        assert!((pdf.quantile(0.99) - 3.96).abs() < 1e-12);
        assert!((pdf.mass_above(3.0) - 0.25).abs() < 1e-12);
        assert!((pdf.mass_above(-1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scatter_reports_positions() {
        let e = ensemble(vec![(member(1.0, 0.5, -0.5, 1.0), 1.0), (member(1.0, 1.0, 1.0, 1.0), 3.0)]);
        let s = position_scatter(&e, 0).unwrap();
        assert_eq!(s[0], ScatterPoint { x: 0.5, y: -0.5, weight: 1.0 });
        assert_eq!(s[1].weight, (-1.0f64).exp());
        assert!(position_scatter(&e, 1).is_err());
    }

    fn arb_scored() -> impl Strategy<Value = Vec<(f64, f64, f64, f64, f64)>> {
        prop::collection::vec((0.0..10.0f64, -2.0..2.0f64, -2.0..2.0f64, 0.0..2.0f64, 0.0..20.0f64), 2..60)
    }

    fn build(rows: &[(f64, f64, f64, f64, f64)]) -> Ensemble {
        ensemble(rows.iter().map(|&(a, x, y, c, chi)| (member(a, x, y, c), chi)).collect())
    }

    proptest! {
        #[test]
        fn pdfs_are_normalized(rows in arb_scored()) {
            let e = build(&rows);
            for id in e.all_params() {
                let pdf = marginal_pdf(&e, id, 37).unwrap();
                prop_assert!(pdf.mass.iter().all(|m| *m >= 0.0));
                prop_assert!((pdf.mass.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn invariant_under_chi2_shift(rows in arb_scored(), shift in -5.0..50.0f64) {
            let e = build(&rows);
            let mut shifted = e.clone();
            shifted.shift_chi2(shift).unwrap();
            let a = rise_parameters(&e, 100).unwrap();
            let b = rise_parameters(&shifted, 100).unwrap();
            for id in e.all_params() {
                let (va, vb) = (id.get(&a), id.get(&b));
                prop_assert!((va - vb).abs() <= 1e-12 * va.abs().max(1.0), "{va} {vb}");
            }
        }

        #[test]
        fn invariant_under_weight_scaling(rows in arb_scored(), factor in 0.01..100.0f64) {
            let e = build(&rows);
            let mut scaled = e.clone();
            scaled.scale_weights(factor);
            let a = rise_image(&e, &grid()).unwrap();
            let b = rise_image(&scaled, &grid()).unwrap();
            for (va, vb) in a.values.iter().zip(&b.values) {
                prop_assert!((va - vb).abs() <= 1e-12 * va.abs().max(1.0));
            }
        }
    }

    #[test]
    fn exact_invariance_for_representable_shifts() {
        let rows: Vec<(f64, f64, f64, f64, f64)> = (0..40)
            .map(|k| {
                let t = k as f64;
                (t * 0.25, (t * 0.1).sin(), (t * 0.3).cos(), 1.0 + t / 64.0, (k % 9) as f64 * 0.5)
            })
            .collect();
        let e = build(&rows);
        let mut shifted = e.clone();
        shifted.shift_chi2(1024.0).unwrap();
        assert_eq!(rise_image(&e, &grid()).unwrap(), rise_image(&shifted, &grid()).unwrap());
        let mut doubled = e.clone();
        doubled.scale_weights(4.0);
        assert_eq!(rise_image(&e, &grid()).unwrap(), rise_image(&doubled, &grid()).unwrap());
    }
}
