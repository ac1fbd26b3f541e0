//! Detection confidence for a hotspot: overlap of the ensemble distribution
//! of the activity at the hotspot center with that of the background alone.

use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, HotspotField, ParamId};
use crate::error::{invalid, Error, Result};
use crate::image_model::model_eval;
use crate::inference::{marginal_pdf, member_weights, summarize, ParameterSummary, Pdf, WEIGHT_FLOOR};

pub const DEFAULT_K_SIGMA: f64 = 3.0;

/// Members whose position for one hotspot lies in `mean +- k * sigma`
/// along both axes (bounds inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSelection {
    pub hotspot: usize,
    pub label: String,
    pub k_sigma: f64,
    pub x: ParameterSummary,
    pub y: ParameterSummary,
    pub x_bounds: [f64; 2],
    pub y_bounds: [f64; 2],
    pub member_count: usize,
    /// Share of the total ensemble weight carried by the selected members.
    pub weight_fraction: f64,
    #[serde(skip)]
    pub members: Vec<usize>,
}

pub fn select_roi(e: &Ensemble, hotspot: usize, k_sigma: f64, n_bins: usize) -> Result<RoiSelection> {
    if hotspot >= e.n_hotspots() {
        return invalid(format!("hotspot index {hotspot} out of range"));
    }
    if !(k_sigma > 0.0 && k_sigma.is_finite()) {
        return invalid(format!("k_sigma must be positive, got {k_sigma}"));
    }
    let x = summarize(&marginal_pdf(e, ParamId::Hotspot { index: hotspot, field: HotspotField::X }, n_bins)?);
    let y = summarize(&marginal_pdf(e, ParamId::Hotspot { index: hotspot, field: HotspotField::Y }, n_bins)?);
    let x_bounds = [x.mean - k_sigma * x.sigma, x.mean + k_sigma * x.sigma];
    let y_bounds = [y.mean - k_sigma * y.sigma, y.mean + k_sigma * y.sigma];
    let members: Vec<usize> = e
        .members
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let h = &m.params.hotspots[hotspot];
            (x_bounds[0]..=x_bounds[1]).contains(&h.x) && (y_bounds[0]..=y_bounds[1]).contains(&h.y)
        })
        .map(|(k, _)| k)
        .collect();
    let label = e.priors.hotspots[hotspot].label.clone();
    if members.is_empty() {
        return Err(Error::EmptyRoi(format!("no ensemble member inside the {k_sigma}-sigma region of {label}")));
    }
    let total: f64 = e.members.iter().map(|m| m.weight).sum();
    let selected: f64 = members.iter().map(|&k| e.members[k].weight).sum();
    Ok(RoiSelection {
        hotspot,
        label,
        k_sigma,
        x,
        y,
        x_bounds,
        y_bounds,
        member_count: members.len(),
        weight_fraction: selected / total,
        members,
    })
}

/// Weighted distributions of the full model (`F`) and of the background
/// alone (`B`), each evaluated at the member's own hotspot center, binned
/// on a common support.
pub fn activity_pdfs(e: &Ensemble, roi: &RoiSelection, n_bins: usize) -> Result<(Pdf, Pdf)> {
    if roi.members.is_empty() {
        return Err(Error::EmptyRoi(format!("empty region for {}", roi.label)));
    }
    let fov = e.grid.fov_radius;
    let all_weights = member_weights(e);
    let mut f = Vec::with_capacity(roi.members.len());
    let mut b = Vec::with_capacity(roi.members.len());
    let mut w = Vec::with_capacity(roi.members.len());
    for &k in &roi.members {
        let m = e
            .members
            .get(k)
            .ok_or_else(|| Error::InvalidInput(format!("ROI member {k} not in ensemble")))?;
        let h = &m.params.hotspots[roi.hotspot];
        f.push(model_eval(&m.params, h.x, h.y, fov));
        b.push(if h.x * h.x + h.y * h.y > fov * fov { 0.0 } else { m.params.background_eval(h.x, h.y, fov) });
        w.push(all_weights[k]);
    }
    let floor = all_weights.iter().copied().fold(0.0, f64::max) * WEIGHT_FLOOR;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for ((&fv, &bv), &wv) in f.iter().zip(&b).zip(&w) {
        if wv > floor {
            lo = lo.min(fv.min(bv));
            hi = hi.max(fv.max(bv));
        }
    }
    if !(lo < hi) {
        return Err(Error::Degenerate(format!(
            "activity samples for {} take fewer than two distinct values",
            roi.label
        )));
    }
    let pad = 0.025 * (hi - lo);
    let pdf_f = Pdf::with_range(format!("{}.F", roi.label), &f, &w, lo - pad, hi + pad, n_bins)?;
    let pdf_b = Pdf::with_range(format!("{}.B", roi.label), &b, &w, lo - pad, hi + pad, n_bins)?;
    Ok((pdf_f, pdf_b))
}

/// `1 - sum_b min(F_b, B_b)` on a shared binning.
///
/// Evaluated as `sum_b |F_b - B_b| / 2`, which is the same quantity for
/// normalized PDFs and is exactly 0 for identical ones; zero overlap gives
/// exactly 1.
pub fn confidence(pdf_f: &Pdf, pdf_b: &Pdf) -> Result<f64> {
    if !pdf_f.same_binning(pdf_b) {
        return Err(Error::ShapeMismatch("activity PDFs use different binnings".into()));
    }
    let overlap: f64 = pdf_f.mass.iter().zip(&pdf_b.mass).map(|(a, b)| a.min(*b)).sum();
    if overlap == 0.0 {
        return Ok(1.0);
    }
    let distance: f64 = pdf_f.mass.iter().zip(&pdf_b.mass).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * distance).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotReport {
    pub label: String,
    pub confidence: f64,
    pub roi: RoiSelection,
    pub amplitude: ParameterSummary,
    pub radius: ParameterSummary,
    pub activity: ParameterSummary,
    pub background: ParameterSummary,
    pub pdf_f: Pdf,
    pub pdf_b: Pdf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<HotspotReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReportEntry {
    pub fn is_ok(&self) -> bool {
        self.report.is_some()
    }
}

pub fn hotspot_report(e: &Ensemble, hotspot: usize, k_sigma: f64, n_bins: usize) -> Result<HotspotReport> {
    let roi = select_roi(e, hotspot, k_sigma, n_bins)?;
    let (pdf_f, pdf_b) = activity_pdfs(e, &roi, n_bins)?;
    let confidence = confidence(&pdf_f, &pdf_b)?;
    let field = |field| marginal_pdf(e, ParamId::Hotspot { index: hotspot, field }, n_bins).map(|p| summarize(&p));
    Ok(HotspotReport {
        label: roi.label.clone(),
        confidence,
        amplitude: field(HotspotField::Amplitude)?,
        radius: field(HotspotField::U)?,
        activity: summarize(&pdf_f),
        background: summarize(&pdf_b),
        roi,
        pdf_f,
        pdf_b,
    })
}

/// Reports for the given hotspots, or for every hotspot with a free
/// parameter when `labels` is empty. Failures become entries rather than
/// aborting the whole report.
pub fn report(e: &Ensemble, labels: &[String], k_sigma: f64, n_bins: usize) -> Vec<ReportEntry> {
    let targets: Vec<String> = if labels.is_empty() {
        e.priors.hotspots.iter().filter(|h| !h.is_fixed()).map(|h| h.label.clone()).collect()
    } else {
        labels.to_vec()
    };
    targets
        .into_iter()
        .map(|label| {
            let result = e
                .priors
                .index_of(&label)
                .ok_or_else(|| Error::InvalidInput(format!("unknown hotspot label {label}")))
                .and_then(|k| hotspot_report(e, k, k_sigma, n_bins));
            match result {
                Ok(r) => ReportEntry { label, report: Some(r), error: None },
                Err(err) => {
                    log::warn!("detection report for {label} failed: {err}");
                    ReportEntry { label, report: None, error: Some(err.to_string()) }
                }
            }
        })
        .collect()
}
