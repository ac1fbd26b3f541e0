//! End-to-end runs: phantom, noisy projections, MLEM, ensemble fitting and
//! hotspot reports, plus the sweep over T:B ratios.
//!
//! Sampling every model parameter jointly is not practical at the ensemble
//! sizes used here, so a run proceeds by blocks. Starting from estimates
//! read off the MLEM image, each pass samples the background coefficients
//! with the features held at their current estimates, then each feature in
//! turn, replacing the estimates by PDF means after every block. Each target
//! hotspot then gets its own full-size ensemble in which its parameters and
//! the constant background term are free.

use serde::{Deserialize, Serialize};

use crate::detection::{hotspot_report, ReportEntry, DEFAULT_K_SIGMA};
use crate::ensemble::{sample_ensemble_with, Ensemble, HotspotPrior, ParamId, Prior, PriorConfig};
use crate::error::{invalid, Error, Result};
use crate::image_model::{render_image, BackgroundCoeffs, HotspotParams, Image, ImageGrid, ParameterVector};
use crate::inference::{marginal_pdf, summarize, DEFAULT_PDF_BINS};
use crate::mlem::{mlem_with_projector, MlemConfig, MlemResult};
use crate::phantom::{build_standard_phantom, render_phantom, PhantomSpec, TbRatio};
use crate::projector::{scale_and_poissonize, AcquisitionGeometry, Projector, Sinogram};
use crate::seed::derive_seed;
use crate::zernike;

pub const DEFAULT_TOTAL_COUNTS: f64 = 278_000.0;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 200_000;

/// Where hotspot position seed boxes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedBoxSource {
    /// Centered on the documented phantom feature positions.
    Layout,
    /// Centered on the strongest deviations of the MLEM image from its
    /// median background.
    Mlem,
}

/// Background terms left free in the per-target ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetBackground {
    Fixed,
    Constant,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub passes: usize,
    pub block_size: usize,
    pub block_stages: usize,
    pub target_background: TargetBackground,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { passes: 2, block_size: 20_000, block_stages: 4, target_background: TargetBackground::Constant }
    }
}

/// Automatic prior ranges, relative to the MLEM background level `bg` and
/// the MLEM contrast `c` at each seed box center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoPriorConfig {
    pub background_n_max: u32,
    /// Amplitude range is `+-(amplitude_contrast_factor * |c| + amplitude_background_factor * bg)`.
    pub amplitude_contrast_factor: f64,
    pub amplitude_background_factor: f64,
    pub radius: [f64; 2],
    pub diffuseness: [f64; 2],
    /// Constant term range as a fraction of `bg`.
    pub constant_range: [f64; 2],
    /// Other Zernike coefficients range over `+-higher_order_fraction * bg`.
    pub higher_order_fraction: f64,
    pub seed_box_half_width: f64,
}

impl Default for AutoPriorConfig {
    fn default() -> Self {
        Self {
            background_n_max: 2,
            amplitude_contrast_factor: 2.5,
            amplitude_background_factor: 0.5,
            radius: [0.6, 5.0],
            diffuseness: [0.01, 0.25],
            constant_range: [0.8, 1.2],
            higher_order_fraction: 0.1,
            seed_box_half_width: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: ImageGrid,
    pub geometry: AcquisitionGeometry,
    pub tb_ratio: TbRatio,
    pub total_counts: f64,
    pub seed: u64,
    pub mlem: MlemConfig,
    pub ensemble_size: usize,
    pub stages: usize,
    pub n_bins: usize,
    pub k_sigma: f64,
    /// Hotspots that get a full-size ensemble and a detection report.
    pub targets: Vec<String>,
    pub seed_boxes: SeedBoxSource,
    pub auto_priors: AutoPriorConfig,
    pub fit: FitConfig,
    /// Explicit priors replacing the automatic ones.
    pub priors: Option<PriorConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: ImageGrid::standard(),
            geometry: AcquisitionGeometry::standard(),
            tb_ratio: TbRatio::new(4.0, 1.0).expect("valid ratio"),
            total_counts: DEFAULT_TOTAL_COUNTS,
            seed: 1,
            mlem: MlemConfig::default(),
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            stages: 5,
            n_bins: DEFAULT_PDF_BINS,
            k_sigma: DEFAULT_K_SIGMA,
            targets: vec!["H1".into(), "H4".into(), "H6".into()],
            seed_boxes: SeedBoxSource::Layout,
            auto_priors: AutoPriorConfig::default(),
            fit: FitConfig::default(),
            priors: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.geometry.validate()?;
        self.mlem.validate()?;
        if !(self.total_counts > 0.0 && self.total_counts.is_finite()) {
            return invalid("total_counts must be positive");
        }
        if self.ensemble_size == 0 {
            return invalid("ensemble_size must be at least 1");
        }
        if self.stages == 0 || self.fit.block_stages == 0 {
            return invalid("stages must be at least 1");
        }
        if self.fit.block_size == 0 && self.fit.passes > 0 {
            return invalid("fit.block_size must be at least 1");
        }
        if self.n_bins < 2 {
            return invalid("n_bins must be at least 2");
        }
        if !(self.k_sigma > 0.0 && self.k_sigma.is_finite()) {
            return invalid("k_sigma must be positive");
        }
        if let Some(p) = &self.priors {
            p.validate(self.grid.fov_radius)?;
        }
        Ok(())
    }
}

/// Phantom, truth image and noisy sinogram for one configuration.
pub struct Acquisition {
    pub phantom: PhantomSpec,
    pub truth: Image,
    pub sinogram: Sinogram,
}

pub fn acquire(projector: &Projector, tb: TbRatio, total_counts: f64, seed: u64) -> Result<Acquisition> {
    let phantom = build_standard_phantom(tb)?;
    let truth = render_phantom(&phantom, projector.grid());
    let clean = projector.forward(&truth)?;
    let sinogram = scale_and_poissonize(&clean, total_counts, derive_seed(seed, "poisson"))?;
    Ok(Acquisition { phantom, truth, sinogram })
}

/// Median of the pixels inside the support disk.
pub fn background_level(img: &Image) -> f64 {
    let grid = img.grid;
    let mut inside: Vec<f64> = (0..grid.len())
        .filter(|&k| {
            let (x, y) = grid.pixel_center(k);
            grid.in_fov(x, y)
        })
        .map(|k| img.values[k])
        .collect();
    if inside.is_empty() {
        return 0.0;
    }
    inside.sort_by(f64::total_cmp);
    inside[inside.len() / 2]
}

/// Mean of the pixels within `radius` of `(x, y)`.
fn local_mean(img: &Image, x: f64, y: f64, radius: f64) -> f64 {
    let grid = img.grid;
    let (mut sum, mut n) = (0.0, 0usize);
    for k in 0..grid.len() {
        let (px, py) = grid.pixel_center(k);
        if (px - x).powi(2) + (py - y).powi(2) <= radius * radius {
            sum += img.values[k];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Seed box centers `(label, x, y)` on the phantom layout.
pub fn layout_seeds(phantom: &PhantomSpec) -> Vec<(String, f64, f64)> {
    phantom.features.iter().map(|f| (f.label.clone(), f.x, f.y)).collect()
}

/// `n` seed centers at the largest `|MLEM - bg|` after 1 mm smoothing,
/// at least `min_separation` apart and `margin` inside the support disk.
pub fn mlem_seeds(img: &Image, n: usize, min_separation: f64, margin: f64) -> Vec<(String, f64, f64)> {
    let grid = img.grid;
    let bg = background_level(img);
    let mut candidates: Vec<(f64, f64, f64)> = (0..grid.len())
        .filter_map(|k| {
            let (x, y) = grid.pixel_center(k);
            let r = (x * x + y * y).sqrt();
            (r <= grid.fov_radius - margin).then(|| ((local_mean(img, x, y, 1.0) - bg).abs(), x, y))
        })
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    let mut seeds: Vec<(f64, f64)> = Vec::new();
    for (_, x, y) in candidates {
        if seeds.len() == n {
            break;
        }
        if seeds.iter().all(|(sx, sy)| (sx - x).hypot(sy - y) >= min_separation) {
            seeds.push((x, y));
        }
    }
    seeds.into_iter().enumerate().map(|(k, (x, y))| (format!("F{}", k + 1), x, y)).collect()
}

/// Uniform priors around seed centers with ranges scaled to the MLEM image.
pub fn auto_priors(mlem: &Image, seeds: &[(String, f64, f64)], cfg: &AutoPriorConfig) -> Result<PriorConfig> {
    let bg = background_level(mlem);
    if !(bg > 0.0) {
        return invalid("MLEM background level is not positive");
    }
    let hw = cfg.seed_box_half_width;
    let hotspots = seeds
        .iter()
        .map(|(label, x, y)| {
            let c = local_mean(mlem, *x, *y, 1.0) - bg;
            let w = cfg.amplitude_contrast_factor * c.abs() + cfg.amplitude_background_factor * bg;
            HotspotPrior {
                label: label.clone(),
                amplitude: Prior::uniform(-w, w),
                x: Prior::uniform(x - hw, x + hw),
                y: Prior::uniform(y - hw, y + hw),
                u: Prior::uniform(cfg.radius[0], cfg.radius[1]),
                v: None,
                phi: None,
                s: Prior::uniform(cfg.diffuseness[0], cfg.diffuseness[1]),
            }
        })
        .collect();
    let background = zernike::indices(cfg.background_n_max)
        .into_iter()
        .map(|idx| {
            if idx.n == 0 {
                Prior::uniform(cfg.constant_range[0] * bg, cfg.constant_range[1] * bg)
            } else {
                let w = cfg.higher_order_fraction * bg;
                Prior::uniform(-w, w)
            }
        })
        .collect();
    let priors = PriorConfig { hotspots, background_n_max: cfg.background_n_max, background };
    priors.validate(mlem.grid.fov_radius)?;
    Ok(priors)
}

/// Starting estimates: box centers, MLEM contrast as amplitude, mid-range
/// shape, constant background at the MLEM level.
pub fn initial_estimates(mlem: &Image, priors: &PriorConfig) -> ParameterVector {
    let bg = background_level(mlem);
    let mut p = priors.template();
    for (h, prior) in p.hotspots.iter_mut().zip(&priors.hotspots) {
        let c = local_mean(mlem, h.x, h.y, 1.0) - bg;
        if let Prior::Uniform([lo, hi]) = prior.amplitude {
            h.amplitude = c.clamp(lo, hi);
        }
    }
    let coeffs = p.background.coefficients_mut();
    for (k, idx) in zernike::indices(priors.background_n_max).into_iter().enumerate() {
        if idx.n > 0 && priors.background[k].is_free() {
            coeffs[k] = 0.0;
        }
        if idx.n == 0 && priors.background[k].is_free() {
            coeffs[k] = bg;
        }
    }
    p
}

/// `base` with every parameter pinned to `est`, except the free parameters
/// of hotspot `free_hotspot` and the selected background terms.
pub fn conditional_priors(
    base: &PriorConfig,
    est: &ParameterVector,
    free_hotspot: Option<usize>,
    background: TargetBackground,
) -> PriorConfig {
    let hotspots = base
        .hotspots
        .iter()
        .enumerate()
        .map(|(k, hp)| {
            if Some(k) == free_hotspot {
                hp.clone()
            } else {
                HotspotPrior::fixed_at(hp.label.clone(), &est.hotspots[k], hp.is_circular())
            }
        })
        .collect();
    let bg_free = |term: usize, n: u32| match background {
        TargetBackground::Fixed => false,
        TargetBackground::Constant => n == 0 && term == 0,
        TargetBackground::All => true,
    };
    let background = zernike::indices(base.background_n_max)
        .into_iter()
        .enumerate()
        .map(|(term, idx)| {
            if bg_free(term, idx.n) && base.background[term].is_free() {
                base.background[term]
            } else {
                Prior::Fixed(est.background.coefficients()[term])
            }
        })
        .collect();
    PriorConfig { hotspots, background_n_max: base.background_n_max, background }
}

/// Copies the PDF means of every free parameter of `e` into `est`.
pub fn update_estimates(e: &Ensemble, est: &mut ParameterVector, n_bins: usize) -> Result<()> {
    for fp in e.priors.free_params() {
        let mean = summarize(&marginal_pdf(e, fp.id, n_bins)?).mean;
        fp.id.set(est, mean);
        if let ParamId::Hotspot { index, .. } = fp.id {
            if e.priors.hotspots[index].is_circular() {
                let h = &mut est.hotspots[index];
                h.v = h.u;
                h.phi = 0.0;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLog {
    pub pass: usize,
    pub block: String,
    pub chi2_min: f64,
}

/// Block-coordinate refinement of `est`; returns the per-block chi-square minima.
pub fn fit_blocks(
    projector: &Projector,
    data: &Sinogram,
    base: &PriorConfig,
    est: &mut ParameterVector,
    fit: &FitConfig,
    n_bins: usize,
    seed: u64,
) -> Result<Vec<BlockLog>> {
    let mut log = Vec::new();
    for pass in 0..fit.passes {
        let mut blocks: Vec<(String, Option<usize>)> = vec![("background".into(), None)];
        blocks.extend(base.hotspots.iter().enumerate().map(|(k, h)| (h.label.clone(), Some(k))));
        for (name, hotspot) in blocks {
            let bg = if hotspot.is_some() { TargetBackground::Fixed } else { TargetBackground::All };
            let priors = conditional_priors(base, est, hotspot, bg);
            if priors.free_params().is_empty() {
                continue;
            }
            let block_seed = derive_seed(seed, &format!("fit/{pass}/{name}"));
            let e = sample_ensemble_with(projector, data, &priors, fit.block_size, block_seed, fit.block_stages)?;
            update_estimates(&e, est, n_bins)?;
            log::debug!("pass {pass} block {name}: chi2_min {:.1}", e.chi2_min);
            log.push(BlockLog { pass, block: name, chi2_min: e.chi2_min });
        }
    }
    Ok(log)
}

pub struct TargetResult {
    pub label: String,
    pub ensemble: Ensemble,
    pub entry: ReportEntry,
}

pub struct RunOutput {
    pub acquisition: Acquisition,
    pub mlem: MlemResult,
    pub priors: PriorConfig,
    pub estimates: ParameterVector,
    pub rise_image: Image,
    pub fit_log: Vec<BlockLog>,
    pub targets: Vec<TargetResult>,
}

pub fn run_single(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let projector = Projector::new(cfg.grid, cfg.geometry)?;
    run_with_projector(&projector, cfg)
}

pub fn run_with_projector(projector: &Projector, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if *projector.grid() != cfg.grid || *projector.geometry() != cfg.geometry {
        return Err(Error::ShapeMismatch("projector does not match the run configuration".into()));
    }
    let acquisition = acquire(projector, cfg.tb_ratio, cfg.total_counts, cfg.seed)?;
    let mlem = mlem_with_projector(projector, &acquisition.sinogram, &cfg.mlem)?;
    let priors = match &cfg.priors {
        Some(p) => p.clone(),
        None => {
            let seeds = match cfg.seed_boxes {
                SeedBoxSource::Layout => layout_seeds(&acquisition.phantom),
                SeedBoxSource::Mlem => mlem_seeds(&mlem.image, acquisition.phantom.features.len(), 4.0, 3.0),
            };
            auto_priors(&mlem.image, &seeds, &cfg.auto_priors)?
        }
    };
    let mut estimates = initial_estimates(&mlem.image, &priors);
    let fit_log = fit_blocks(
        projector,
        &acquisition.sinogram,
        &priors,
        &mut estimates,
        &cfg.fit,
        cfg.n_bins,
        derive_seed(cfg.seed, "fit"),
    )?;

    let mut targets = Vec::new();
    let mut final_estimates = estimates.clone();
    for label in &cfg.targets {
        let Some(index) = priors.index_of(label) else {
            return invalid(format!("target {label} is not a modelled hotspot"));
        };
        let target_priors = conditional_priors(&priors, &estimates, Some(index), cfg.fit.target_background);
        let seed = derive_seed(cfg.seed, &format!("target/{label}"));
        let ensemble = sample_ensemble_with(
            projector,
            &acquisition.sinogram,
            &target_priors,
            cfg.ensemble_size,
            seed,
            cfg.stages,
        )?;
        let mut target_est = estimates.clone();
        update_estimates(&ensemble, &mut target_est, cfg.n_bins)?;
        final_estimates.hotspots[index] = target_est.hotspots[index];
        let entry = match hotspot_report(&ensemble, index, cfg.k_sigma, cfg.n_bins) {
            Ok(r) => ReportEntry { label: label.clone(), report: Some(r), error: None },
            Err(err) => {
                log::warn!("report for {label} failed: {err}");
                ReportEntry { label: label.clone(), report: None, error: Some(err.to_string()) }
            }
        };
        log::info!(
            "{} {label}: chi2_min {:.1}, C = {}",
            cfg.tb_ratio,
            ensemble.chi2_min,
            entry.report.as_ref().map_or("n/a".to_string(), |r| format!("{:.4}", r.confidence))
        );
        targets.push(TargetResult { label: label.clone(), ensemble, entry });
    }
    let rise_image = render_image(&final_estimates, &cfg.grid);
    Ok(RunOutput { acquisition, mlem, priors, estimates: final_estimates, rise_image, fit_log, targets })
}

// ---- sweep ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub run: RunConfig,
    pub ratios: Vec<TbRatio>,
    pub replicates: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { run: RunConfig::default(), ratios: TbRatio::standard_sweep(), replicates: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub label: String,
    pub confidence: Option<f64>,
    pub x_mean: Option<f64>,
    pub x_sigma: Option<f64>,
    pub y_mean: Option<f64>,
    pub y_sigma: Option<f64>,
    pub weight_fraction: Option<f64>,
    /// Mass of the F distribution above the 99th percentile of B.
    pub f_mass_above_b99: Option<f64>,
    pub error: Option<String>,
}

impl TargetSummary {
    fn from_entry(entry: &ReportEntry) -> Self {
        match &entry.report {
            Some(r) => Self {
                label: entry.label.clone(),
                confidence: Some(r.confidence),
                x_mean: Some(r.roi.x.mean),
                x_sigma: Some(r.roi.x.sigma),
                y_mean: Some(r.roi.y.mean),
                y_sigma: Some(r.roi.y.sigma),
                weight_fraction: Some(r.roi.weight_fraction),
                f_mass_above_b99: Some(r.pdf_f.mass_above(r.pdf_b.quantile(0.99))),
                error: None,
            },
            None => Self {
                label: entry.label.clone(),
                confidence: None,
                x_mean: None,
                x_sigma: None,
                y_mean: None,
                y_sigma: None,
                weight_fraction: None,
                f_mass_above_b99: None,
                error: entry.error.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub ratio: TbRatio,
    pub replicate: usize,
    pub seed: u64,
    pub targets: Vec<TargetSummary>,
    /// Location of the RISE image maximum.
    pub rise_max_at: Option<[f64; 2]>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAverage {
    pub ratio: TbRatio,
    pub label: String,
    pub n_ok: usize,
    pub confidence: Option<f64>,
    pub x_sigma: Option<f64>,
    pub y_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub averages: Vec<SweepAverage>,
}

impl SweepReport {
    pub fn average(&self, ratio: TbRatio, label: &str) -> Option<&SweepAverage> {
        self.averages.iter().find(|a| a.ratio == ratio && a.label == label)
    }

    /// Rows = hotspot, columns = T:B ratio, values = mean confidence.
    pub fn confidence_table(&self, ratios: &[TbRatio], labels: &[String]) -> Vec<Vec<String>> {
        labels
            .iter()
            .map(|label| {
                let mut row = vec![label.clone()];
                row.extend(ratios.iter().map(|&r| {
                    self.average(r, label).and_then(|a| a.confidence).map_or(String::new(), |c| c.to_string())
                }));
                row
            })
            .collect()
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every ratio for every replicate. Replicate `i` uses the seed
/// `derive_seed(run.seed, "replicate/i")` at every ratio. A failing run is
/// recorded in its cell and the sweep continues.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.run.validate()?;
    let projector = Projector::new(cfg.run.grid, cfg.run.geometry)?;
    let mut cells = Vec::new();
    for replicate in 0..cfg.replicates {
        let seed = derive_seed(cfg.run.seed, &format!("replicate/{replicate}"));
        for &ratio in &cfg.ratios {
            let run = RunConfig { tb_ratio: ratio, seed, ..cfg.run.clone() };
            log::info!("sweep: ratio {ratio}, replicate {replicate}");
            let cell = match run_with_projector(&projector, &run) {
                Ok(out) => {
                    let (k, _) = out.rise_image.argmax();
                    let (x, y) = cfg.run.grid.pixel_center(k);
                    SweepCell {
                        ratio,
                        replicate,
                        seed,
                        targets: out.targets.iter().map(|t| TargetSummary::from_entry(&t.entry)).collect(),
                        rise_max_at: Some([x, y]),
                        error: None,
                    }
                }
                Err(err) => {
                    log::warn!("sweep: ratio {ratio}, replicate {replicate} failed: {err}");
                    SweepCell { ratio, replicate, seed, targets: vec![], rise_max_at: None, error: Some(err.to_string()) }
                }
            };
            cells.push(cell);
        }
    }
    let mut averages = Vec::new();
    for &ratio in &cfg.ratios {
        for label in &cfg.run.targets {
            let rows: Vec<&TargetSummary> = cells
                .iter()
                .filter(|c| c.ratio == ratio)
                .flat_map(|c| c.targets.iter().filter(|t| &t.label == label))
                .collect();
            averages.push(SweepAverage {
                ratio,
                label: label.clone(),
                n_ok: rows.iter().filter(|t| t.confidence.is_some()).count(),
                confidence: mean_of(rows.iter().map(|t| t.confidence)),
                x_sigma: mean_of(rows.iter().map(|t| t.x_sigma)),
                y_sigma: mean_of(rows.iter().map(|t| t.y_sigma)),
            });
        }
    }
    Ok(SweepReport { cells, averages })
}

/// Background coefficients `[bg, 0, ...]` used by tests and small runs.
pub fn constant_background(n_max: u32, bg: f64) -> BackgroundCoeffs {
    BackgroundCoeffs::constant(n_max, bg)
}

/// Parameter vector with the phantom's features as hard-ish circular hotspots
/// over its background, for comparisons against fitted estimates.
pub fn phantom_as_model(p: &PhantomSpec, n_max: u32, s: f64) -> ParameterVector {
    let hotspots = p
        .features
        .iter()
        .map(|f| HotspotParams::circular(f.activity - p.background_activity, f.x, f.y, f.radius, s))
        .collect();
    ParameterVector::new(hotspots, BackgroundCoeffs::constant(n_max, p.background_activity))
}
