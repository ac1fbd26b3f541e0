use std::fs;
use std::path::Path;

use anyhow::Context;
use rise_core::detection::report;
use rise_core::ensemble::{sample_ensemble_with, HotspotField, ParamId, PriorConfig};
use rise_core::image_model::Image;
use rise_core::inference::{marginal_pdf, position_scatter, rise_image, summarize, ParameterSummary};
use rise_core::io;
use rise_core::mlem::mlem_with_projector;
use rise_core::phantom::{build_standard_phantom, render_phantom, TbRatio};
use rise_core::pipeline::{
    acquire, auto_priors, conditional_priors, fit_blocks, initial_estimates, layout_seeds, mlem_seeds, sweep,
    SeedBoxSource, SweepConfig,
};
use rise_core::projector::Projector;
use rise_core::seed::derive_seed;
use serde::Serialize;

use crate::manifest::{Outputs, CONFIG_FILE};
use crate::{Cli, Command, Failure, GlobalArgs, RiseCommand};

fn parse_ratios(text: &str) -> Result<Vec<TbRatio>, Failure> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<TbRatio>().map_err(|e| Failure::Usage(format!("--tb {s}: {e}"))))
        .collect()
}

/// Configuration file (if any) with flag and environment overrides applied.
fn load_config(g: &GlobalArgs, sweeping: bool) -> Result<SweepConfig, Failure> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Input(format!("reading config {}: {e}", path.display())))?;
            toml::from_str::<SweepConfig>(&text)
                .map_err(|e| Failure::Usage(format!("config {}: {}", path.display(), e.message())))?
        }
        None => SweepConfig::default(),
    };
    let run = &mut cfg.run;
    if let Some(seed) = g.seed {
        run.seed = seed;
    }
    if let Some(tb) = &g.tb {
        let ratios = parse_ratios(tb)?;
        if sweeping {
            cfg.ratios = ratios;
        } else {
            match ratios.as_slice() {
                [one] => cfg.run.tb_ratio = *one,
                _ => return Err(Failure::Usage("--tb takes exactly one ratio outside `sweep`".into())),
            }
        }
    }
    let run = &mut cfg.run;
    if let Some(c) = g.counts {
        run.total_counts = c;
    }
    if let Some(n) = g.ensemble_size {
        run.ensemble_size = n as usize;
    }
    if let Some(s) = g.stages {
        run.stages = s as usize;
    }
    if let Some(k) = g.k_sigma {
        run.k_sigma = k;
    }
    if let Some(b) = g.bins {
        run.n_bins = b as usize;
    }
    run.validate()?;
    Ok(cfg)
}

fn write_config(out: &mut Outputs, cfg: &SweepConfig) -> Result<(), Failure> {
    io::write_json(&out.file(CONFIG_FILE), cfg)?;
    Ok(())
}

fn write_image(out: &mut Outputs, stem: &str, img: &Image) -> Result<(), Failure> {
    io::write_pgm(&out.file(&format!("{stem}.pgm")), img)?;
    io::write_image_csv(&out.file(&format!("{stem}.csv")), img)?;
    Ok(())
}

fn words(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Phantom => {
            let cfg = load_config(g, false)?;
            let mut out = Outputs::new(&g.out)?;
            write_config(&mut out, &cfg)?;
            let phantom = build_standard_phantom(cfg.run.tb_ratio)?;
            io::write_json(&out.file("phantom.json"), &phantom)?;
            write_image(&mut out, "truth", &render_phantom(&phantom, &cfg.run.grid))?;
            out.finish(&words(&["phantom"]), cfg.run.seed)?;
        }
        Command::Project => {
            let cfg = load_config(g, false)?;
            let run = &cfg.run;
            let mut out = Outputs::new(&g.out)?;
            write_config(&mut out, &cfg)?;
            let projector = Projector::new(run.grid, run.geometry)?;
            let acq = acquire(&projector, run.tb_ratio, run.total_counts, run.seed)?;
            io::write_json(&out.file("phantom.json"), &acq.phantom)?;
            write_image(&mut out, "truth", &acq.truth)?;
            io::write_sinogram(&out.file("sinogram.csv"), &acq.sinogram)?;
            log::info!("sinogram total {} counts", acq.sinogram.total());
            out.finish(&words(&["project"]), run.seed)?;
        }
        Command::Mlem { sinogram } => {
            let cfg = load_config(g, false)?;
            let run = &cfg.run;
            let data = io::read_sinogram(sinogram)?;
            let mut out = Outputs::new(&g.out)?;
            out.input(sinogram);
            write_config(&mut out, &cfg)?;
            let projector = Projector::new(run.grid, data.geometry)?;
            let result = mlem_with_projector(&projector, &data, &run.mlem)?;
            write_image(&mut out, "mlem", &result.image)?;
            io::write_trace_csv(&out.file("mlem_trace.csv"), &result.log_likelihood)?;
            out.finish(&[words(&["mlem", "--sinogram"]), vec![sinogram.display().to_string()]].concat(), run.seed)?;
        }
        Command::Rise { command } => rise(g, command)?,
        Command::Sweep { replicates } => {
            let mut cfg = load_config(g, true)?;
            if let Some(r) = replicates {
                cfg.replicates = *r;
            }
            let mut out = Outputs::new(&g.out)?;
            write_config(&mut out, &cfg)?;
            let report = sweep(&cfg)?;
            io::write_json(&out.file("sweep.json"), &report)?;
            for cell in &report.cells {
                let name = format!("{}/replicate_{}.json", cell.ratio.slug(), cell.replicate);
                io::write_json(&out.file(&name), cell)?;
            }
            let labels = &cfg.run.targets;
            let mut header = vec!["hotspot".to_string()];
            header.extend(cfg.ratios.iter().map(|r| r.to_string()));
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            io::write_csv_table(&out.file("confidence.csv"), &header, &report.confidence_table(&cfg.ratios, labels))?;
            let rows: Vec<Vec<String>> = report
                .averages
                .iter()
                .map(|a| {
                    let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                    vec![
                        a.label.clone(),
                        a.ratio.to_string(),
                        a.n_ok.to_string(),
                        f(a.confidence),
                        f(a.x_sigma),
                        f(a.y_sigma),
                    ]
                })
                .collect();
            io::write_csv_table(
                &out.file("summary.csv"),
                &["hotspot", "tb_ratio", "n_ok", "confidence", "x_sigma_mm", "y_sigma_mm"],
                &rows,
            )?;
            out.finish(&words(&["sweep"]), cfg.run.seed)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct NamedSummary {
    parameter: String,
    #[serde(flatten)]
    summary: ParameterSummary,
}

fn rise(g: &GlobalArgs, command: &RiseCommand) -> Result<(), Failure> {
    let cfg = load_config(g, false)?;
    let run = &cfg.run;
    match command {
        RiseCommand::Sample { sinogram, priors, target } => {
            let data = io::read_sinogram(sinogram)?;
            let mut out = Outputs::new(&g.out)?;
            out.input(sinogram);
            write_config(&mut out, &cfg)?;
            let projector = Projector::new(run.grid, data.geometry)?;
            let mut command = words(&["rise", "sample", "--sinogram"]);
            command.push(sinogram.display().to_string());
            let sample_priors = match priors {
                Some(path) => {
                    out.input(path);
                    command.extend(["--priors".to_string(), path.display().to_string()]);
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<PriorConfig>(&text)
                        .map_err(|e| Failure::Usage(format!("priors {}: {e}", path.display())))?
                }
                None => {
                    let mlem = mlem_with_projector(&projector, &data, &run.mlem)?;
                    let n_features = build_standard_phantom(run.tb_ratio)?.features.len();
                    let seeds = match run.seed_boxes {
                        SeedBoxSource::Layout => layout_seeds(&build_standard_phantom(run.tb_ratio)?),
                        SeedBoxSource::Mlem => mlem_seeds(&mlem.image, n_features, 4.0, 3.0),
                    };
                    let base = auto_priors(&mlem.image, &seeds, &run.auto_priors)?;
                    io::write_json(&out.file("priors_auto.json"), &base)?;
                    let label = match target {
                        Some(t) => t.clone(),
                        None => run
                            .targets
                            .iter()
                            .find(|t| base.index_of(t).is_some())
                            .cloned()
                            .unwrap_or_else(|| base.hotspots[0].label.clone()),
                    };
                    command.extend(["--target".to_string(), label.clone()]);
                    let index = base
                        .index_of(&label)
                        .ok_or_else(|| Failure::Usage(format!("unknown target hotspot {label}")))?;
                    let mut est = initial_estimates(&mlem.image, &base);
                    let fit_log =
                        fit_blocks(&projector, &data, &base, &mut est, &run.fit, run.n_bins, derive_seed(run.seed, "fit"))?;
                    io::write_json(&out.file("fit_log.json"), &fit_log)?;
                    io::write_json(&out.file("estimates.json"), &est)?;
                    conditional_priors(&base, &est, Some(index), run.fit.target_background)
                }
            };
            let e = sample_ensemble_with(&projector, &data, &sample_priors, run.ensemble_size, run.seed, run.stages)?;
            io::write_ensemble(&out.file("ensemble.csv"), &e)?;
            out.file("ensemble.json");
            log::info!("ensemble of {} members, chi2_min {}", e.len(), e.chi2_min);
            out.finish(&command, run.seed)?;
        }
        RiseCommand::Infer { ensemble } => {
            let e = io::read_ensemble(ensemble)?;
            let mut out = Outputs::new(&g.out)?;
            out.input(ensemble);
            out.input(&io::sidecar_path(ensemble));
            write_config(&mut out, &cfg)?;
            let mut summaries = Vec::new();
            for fp in e.priors.free_params() {
                let name = e.param_name(fp.id);
                let pdf = marginal_pdf(&e, fp.id, run.n_bins)?;
                io::write_pdf_csv(&out.file(&format!("pdf_{name}.csv")), &pdf)?;
                summaries.push(NamedSummary { parameter: name, summary: summarize(&pdf) });
            }
            io::write_json(&out.file("summary.json"), &summaries)?;
            for (k, h) in e.priors.hotspots.iter().enumerate() {
                let moves = e.priors.free_params().iter().any(|fp| {
                    matches!(fp.id, ParamId::Hotspot { index, field } if index == k
                        && matches!(field, HotspotField::X | HotspotField::Y))
                });
                if moves {
                    io::write_scatter_csv(&out.file(&format!("scatter_{}.csv", h.label)), &position_scatter(&e, k)?)?;
                }
            }
            write_image(&mut out, "rise", &rise_image(&e, &e.grid)?)?;
            out.finish(&ensemble_command("infer", ensemble), run.seed)?;
        }
        RiseCommand::Detect { ensemble, labels } => {
            let e = io::read_ensemble(ensemble)?;
            let mut out = Outputs::new(&g.out)?;
            out.input(ensemble);
            out.input(&io::sidecar_path(ensemble));
            write_config(&mut out, &cfg)?;
            let entries = report(&e, labels, run.k_sigma, run.n_bins);
            io::write_json(&out.file("reports.json"), &entries)?;
            let rows: Vec<Vec<String>> = entries
                .iter()
                .map(|entry| match &entry.report {
                    Some(r) => vec![
                        entry.label.clone(),
                        r.confidence.to_string(),
                        r.roi.x.mean.to_string(),
                        r.roi.x.sigma.to_string(),
                        r.roi.y.mean.to_string(),
                        r.roi.y.sigma.to_string(),
                        String::new(),
                    ],
                    None => {
                        let mut row = vec![entry.label.clone()];
                        row.extend(std::iter::repeat_n(String::new(), 5));
                        row.push(entry.error.clone().unwrap_or_default().replace(',', ";"));
                        row
                    }
                })
                .collect();
            io::write_csv_table(
                &out.file("confidence.csv"),
                &["hotspot", "confidence", "x_mean_mm", "x_sigma_mm", "y_mean_mm", "y_sigma_mm", "error"],
                &rows,
            )?;
            for entry in &entries {
                if let Some(r) = &entry.report {
                    io::write_pdf_csv(&out.file(&format!("pdf_F_{}.csv", entry.label)), &r.pdf_f)?;
                    io::write_pdf_csv(&out.file(&format!("pdf_B_{}.csv", entry.label)), &r.pdf_b)?;
                }
            }
            let mut command = ensemble_command("detect", ensemble);
            if !labels.is_empty() {
                command.extend(["--labels".to_string(), labels.join(",")]);
            }
            out.finish(&command, run.seed)?;
        }
    }
    Ok(())
}

fn ensemble_command(sub: &str, ensemble: &Path) -> Vec<String> {
    vec!["rise".into(), sub.into(), "--ensemble".into(), ensemble.display().to_string()]
}
