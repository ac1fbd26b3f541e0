//! File formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so text
//! files reproduce every value bit for bit. Images are written top row
//! first (largest `y`), matching how they are viewed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, EnsembleMember, ParamId, PriorConfig};
use crate::error::{Error, Result};
use crate::image_model::{BackgroundCoeffs, HotspotParams, Image, ImageGrid, ParameterVector};
use crate::inference::{Pdf, ScatterPoint};
use crate::projector::{AcquisitionGeometry, Sinogram};

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| parse_err(format!("bad number for {what}: {s:?}")))
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| with_path(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| with_path(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

// ---- images ----

/// 16-bit binary PGM. Values map linearly onto 0..=65535; the offset and
/// scale are recorded in a header comment so that `value = offset + scale * q`.
pub fn image_to_pgm(img: &Image) -> Vec<u8> {
    let (lo, hi) = img
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if img.values.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let scale = if hi > lo { (hi - lo) / 65535.0 } else { 1.0 };
    let (w, h) = (img.grid.width_px, img.grid.height_px);
    let mut out = format!("P5\n# offset {lo} scale {scale}\n{w} {h}\n65535\n").into_bytes();
    for j in (0..h).rev() {
        for i in 0..w {
            let q = ((img.get(i, j) - lo) / scale).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    out
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
        }
    }
    fs::write(path, image_to_pgm(img)).map_err(|e| with_path(path, e))?;
    Ok(())
}

/// Reads a file written by [`write_pgm`] back onto `grid`.
pub fn pgm_to_image(bytes: &[u8], grid: ImageGrid) -> Result<Image> {
    let mut fields: Vec<String> = Vec::new();
    let (mut offset, mut scale) = (0.0, 1.0);
    let mut pos = 0;
    while fields.len() < 4 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err("truncated PGM header"))?
            + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| parse_err("PGM header is not text"))?;
        pos = end + 1;
        if let Some(comment) = line.strip_prefix('#') {
            let parts: Vec<&str> = comment.split_whitespace().collect();
            if let ["offset", o, "scale", s] = parts.as_slice() {
                offset = parse_f64(o, "PGM offset")?;
                scale = parse_f64(s, "PGM scale")?;
            }
            continue;
        }
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(parse_err("expected a 16-bit P5 PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| parse_err("bad PGM width"))?;
    let h: usize = fields[2].parse().map_err(|_| parse_err("bad PGM height"))?;
    if w != grid.width_px || h != grid.height_px {
        return Err(Error::ShapeMismatch(format!("PGM is {w}x{h}, grid is {}x{}", grid.width_px, grid.height_px)));
    }
    let data = &bytes[pos..];
    if data.len() != 2 * w * h {
        return Err(parse_err("PGM pixel data has the wrong length"));
    }
    let mut values = vec![0.0; w * h];
    for (k, chunk) in data.chunks_exact(2).enumerate() {
        let (row, i) = (k / w, k % w);
        let j = h - 1 - row;
        values[j * w + i] = offset + scale * f64::from(u16::from_be_bytes([chunk[0], chunk[1]]));
    }
    Image::from_values(grid, values)
}

pub fn image_to_csv(img: &Image) -> String {
    let mut out = String::new();
    for j in (0..img.grid.height_px).rev() {
        let row: Vec<String> = (0..img.grid.width_px).map(|i| img.get(i, j).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn csv_to_image(text: &str, grid: ImageGrid) -> Result<Image> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != grid.height_px {
        return Err(Error::ShapeMismatch(format!("image CSV has {} rows, grid has {}", rows.len(), grid.height_px)));
    }
    let mut values = vec![0.0; grid.len()];
    for (r, line) in rows.iter().enumerate() {
        let j = grid.height_px - 1 - r;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != grid.width_px {
            return Err(Error::ShapeMismatch(format!("image CSV row {r} has {} cells", cells.len())));
        }
        for (i, c) in cells.iter().enumerate() {
            values[j * grid.width_px + i] = parse_f64(c, "pixel")?;
        }
    }
    Image::from_values(grid, values)
}

pub fn write_image_csv(path: &Path, img: &Image) -> Result<()> {
    write_text(path, &image_to_csv(img))
}

pub fn read_image_csv(path: &Path, grid: ImageGrid) -> Result<Image> {
    csv_to_image(&read_text(path)?, grid)
}

// ---- sinograms ----

/// Header lines `key,value`, then a `[counts]` block with one row per
/// angle and an optional `[errors]` block of the same shape.
pub fn sinogram_to_csv(s: &Sinogram) -> String {
    let g = &s.geometry;
    let mut out = String::new();
    let _ = writeln!(out, "n_angles,{}", g.n_angles);
    let _ = writeln!(out, "angular_range_deg,{}", g.angular_range_deg);
    let _ = writeln!(out, "n_bins,{}", g.n_bins);
    let _ = writeln!(out, "bin_width_mm,{}", g.bin_width);
    match s.seed {
        Some(seed) => {
            let _ = writeln!(out, "seed,{seed}");
        }
        None => out.push_str("seed,none\n"),
    }
    let _ = writeln!(out, "total_counts,{}", s.total());
    let mut block = |name: &str, values: &[f64]| {
        let _ = writeln!(out, "[{name}]");
        for row in values.chunks(g.n_bins) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    };
    block("counts", &s.counts);
    if let Some(errors) = &s.errors {
        block("errors", errors);
    }
    out
}

pub fn csv_to_sinogram(text: &str) -> Result<Sinogram> {
    let mut header = std::collections::BTreeMap::new();
    let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            blocks.push((name.to_string(), Vec::new()));
        } else if let Some((_, values)) = blocks.last_mut() {
            for c in line.split(',') {
                values.push(parse_f64(c, "sinogram bin")?);
            }
        } else {
            let (k, v) = line.split_once(',').ok_or_else(|| parse_err(format!("bad header line {line:?}")))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| header.get(k).ok_or_else(|| parse_err(format!("missing header field {k}")));
    let n_angles: usize = get("n_angles")?.parse().map_err(|_| parse_err("bad n_angles"))?;
    let n_bins: usize = get("n_bins")?.parse().map_err(|_| parse_err("bad n_bins"))?;
    let geometry = AcquisitionGeometry::new(
        n_angles,
        parse_f64(get("angular_range_deg")?, "angular_range_deg")?,
        n_bins,
        parse_f64(get("bin_width_mm")?, "bin_width_mm")?,
    )?;
    let seed = match header.get("seed").map(String::as_str) {
        None | Some("none") => None,
        Some(v) => Some(v.parse().map_err(|_| parse_err("bad seed"))?),
    };
    let mut counts = None;
    let mut errors = None;
    for (name, values) in blocks {
        match name.as_str() {
            "counts" => counts = Some(values),
            "errors" => errors = Some(values),
            other => return Err(parse_err(format!("unknown sinogram block [{other}]"))),
        }
    }
    let counts = counts.ok_or_else(|| parse_err("missing [counts] block"))?;
    let mut s = match errors {
        Some(e) => Sinogram::with_errors(geometry, counts, e)?,
        None => Sinogram::new(geometry, counts)?,
    };
    s.seed = seed;
    Ok(s)
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    write_text(path, &sinogram_to_csv(s))
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    csv_to_sinogram(&read_text(path)?)
}

// ---- ensembles ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSidecar {
    pub seed: u64,
    pub n: usize,
    pub stages: usize,
    pub chi2_min: f64,
    pub grid: ImageGrid,
    pub priors: PriorConfig,
    pub columns: Vec<String>,
}

/// One row per member: `stage,chi2,weight` and then every model parameter.
pub fn ensemble_to_csv(e: &Ensemble) -> String {
    let ids = e.all_params();
    let labels = e.labels();
    let mut out = String::with_capacity(e.len() * 16 * (ids.len() + 3));
    out.push_str("stage,chi2,weight");
    for id in &ids {
        out.push(',');
        out.push_str(&id.name(&labels, e.priors.background_n_max));
    }
    out.push('\n');
    for m in &e.members {
        let _ = write!(out, "{},{},{}", m.stage, m.chi2, m.weight);
        for id in &ids {
            let _ = write!(out, ",{}", id.get(&m.params));
        }
        out.push('\n');
    }
    out
}

pub fn ensemble_sidecar(e: &Ensemble) -> EnsembleSidecar {
    let mut columns = vec!["stage".to_string(), "chi2".to_string(), "weight".to_string()];
    let labels = e.labels();
    columns.extend(e.all_params().into_iter().map(|id| id.name(&labels, e.priors.background_n_max)));
    EnsembleSidecar {
        seed: e.seed,
        n: e.len(),
        stages: e.stages,
        chi2_min: e.chi2_min,
        grid: e.grid,
        priors: e.priors.clone(),
        columns,
    }
}

pub fn parse_ensemble(csv: &str, sidecar: EnsembleSidecar) -> Result<Ensemble> {
    let n_hot = sidecar.priors.hotspots.len();
    let n_max = sidecar.priors.background_n_max;
    let ids = ParamId::all(n_hot, n_max);
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| parse_err("empty ensemble CSV"))?;
    if header.split(',').map(str::to_string).collect::<Vec<_>>() != sidecar.columns {
        return Err(parse_err("ensemble CSV columns do not match the sidecar"));
    }
    let template = ParameterVector::new(
        vec![HotspotParams::circular(0.0, 0.0, 0.0, 1.0, 0.1); n_hot],
        BackgroundCoeffs::zeros(n_max),
    );
    let mut members = Vec::with_capacity(sidecar.n);
    for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != ids.len() + 3 {
            return Err(parse_err(format!("ensemble row {row} has {} cells", cells.len())));
        }
        let stage = cells[0].trim().parse().map_err(|_| parse_err(format!("bad stage in row {row}")))?;
        let mut params = template.clone();
        for (id, c) in ids.iter().zip(&cells[3..]) {
            id.set(&mut params, parse_f64(c, "parameter")?);
        }
        members.push(EnsembleMember {
            params,
            chi2: parse_f64(cells[1], "chi2")?,
            weight: parse_f64(cells[2], "weight")?,
            stage,
        });
    }
    if members.len() != sidecar.n {
        return Err(parse_err(format!("sidecar lists {} members, CSV has {}", sidecar.n, members.len())));
    }
    Ok(Ensemble {
        members,
        chi2_min: sidecar.chi2_min,
        seed: sidecar.seed,
        stages: sidecar.stages,
        priors: sidecar.priors,
        grid: sidecar.grid,
    })
}

/// Path of the JSON sidecar next to an ensemble CSV.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

pub fn write_ensemble(csv_path: &Path, e: &Ensemble) -> Result<()> {
    write_text(csv_path, &ensemble_to_csv(e))?;
    write_json(&sidecar_path(csv_path), &ensemble_sidecar(e))
}

pub fn read_ensemble(csv_path: &Path) -> Result<Ensemble> {
    let sidecar: EnsembleSidecar = read_json(&sidecar_path(csv_path))?;
    parse_ensemble(&read_text(csv_path)?, sidecar)
}

// ---- small tables ----

pub fn pdf_to_csv(pdf: &Pdf) -> String {
    let mut out = String::from("bin_lo,bin_hi,centroid,mass,density\n");
    let density = pdf.density();
    for b in 0..pdf.n_bins() {
        let lo = pdf.lo + b as f64 * pdf.bin_width;
        let _ = writeln!(out, "{},{},{},{},{}", lo, lo + pdf.bin_width, pdf.centroid[b], pdf.mass[b], density[b]);
    }
    out
}

pub fn write_pdf_csv(path: &Path, pdf: &Pdf) -> Result<()> {
    write_text(path, &pdf_to_csv(pdf))
}

pub fn write_scatter_csv(path: &Path, points: &[ScatterPoint]) -> Result<()> {
    let mut out = String::from("x,y,weight\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.x, p.y, p.weight);
    }
    write_text(path, &out)
}

pub fn write_trace_csv(path: &Path, log_likelihood: &[f64]) -> Result<()> {
    let mut out = String::from("iteration,log_likelihood\n");
    for (k, v) in log_likelihood.iter().enumerate() {
        let _ = writeln!(out, "{k},{v}");
    }
    write_text(path, &out)
}

pub fn write_csv_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{HotspotPrior, Prior};
    use crate::image_model::render_image;
    use proptest::prelude::*;

    fn grid() -> ImageGrid {
        ImageGrid::new(5, 3, 1.0, 10.0).unwrap()
    }

    #[test]
    fn image_csv_is_top_down_and_exact() {
        let values: Vec<f64> = (0..15).map(|k| k as f64 * 0.1 + 1e-17).collect();
        let img = Image::from_values(grid(), values).unwrap();
        let text = image_to_csv(&img);
        assert!(text.starts_with(&format!("{},", 10.0 * 0.1 + 1e-17)));
        assert_eq!(csv_to_image(&text, grid()).unwrap(), img);
        assert!(csv_to_image("1,2\n", grid()).is_err());
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let g = ImageGrid::new(16, 12, 1.0, 10.0).unwrap();
        let p = ParameterVector::new(
            vec![HotspotParams::circular(5.0, 1.0, 2.0, 3.0, 0.1)],
            BackgroundCoeffs::constant(0, 1.0),
        );
        let img = render_image(&p, &g);
        let back = pgm_to_image(&image_to_pgm(&img), g).unwrap();
        let step = 6.0 / 65535.0;
        for (a, b) in img.values.iter().zip(&back.values) {
            assert!((a - b).abs() <= step);
        }
        let bytes = image_to_pgm(&img);
        assert!(bytes.starts_with(b"P5\n# offset "));
    }

    fn arb_sinogram() -> impl Strategy<Value = Sinogram> {
        (1usize..5, 1usize..7, any::<bool>(), any::<Option<u64>>()).prop_flat_map(|(na, nb, errs, seed)| {
            let n = na * nb;
            (
                prop::collection::vec(prop_oneof![0.0..1e7f64, (0u32..1000).prop_map(f64::from)], n),
                prop::collection::vec(1e-3..1e4f64, n),
            )
                .prop_map(move |(counts, errors)| {
                    let g = AcquisitionGeometry::new(na, 360.0, nb, 0.4).unwrap();
                    let mut s = if errs {
                        Sinogram::with_errors(g, counts, errors).unwrap()
                    } else {
                        Sinogram::new(g, counts).unwrap()
                    };
                    s.seed = seed;
                    s
                })
        })
    }

    proptest! {
        #[test]
        fn sinogram_round_trip_is_bit_exact(s in arb_sinogram()) {
            let back = csv_to_sinogram(&sinogram_to_csv(&s)).unwrap();
            prop_assert_eq!(&back, &s);
            for (a, b) in back.counts.iter().zip(&s.counts) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn sinogram_parse_errors() {
        assert!(csv_to_sinogram("n_angles,1\n").is_err());
        let s = Sinogram::new(AcquisitionGeometry::new(1, 360.0, 2, 1.0).unwrap(), vec![1.0, 2.0]).unwrap();
        let text = sinogram_to_csv(&s).replace("1,2", "1,x");
        assert!(csv_to_sinogram(&text).is_err());
    }

    #[test]
    fn ensemble_round_trip() {
        let priors = PriorConfig {
            hotspots: vec![HotspotPrior {
                label: "H1".into(),
                amplitude: Prior::uniform(0.0, 10.0),
                x: Prior::uniform(-1.0, 1.0),
                y: Prior::Fixed(0.5),
                u: Prior::Fixed(2.0),
                v: None,
                phi: None,
                s: Prior::Fixed(0.1),
            }],
            background_n_max: 1,
            background: vec![Prior::uniform(0.0, 1.0), Prior::Fixed(0.0), Prior::Fixed(0.0)],
        };
        let scored = (0..5)
            .map(|k| {
                let p = ParameterVector::new(
                    vec![HotspotParams::circular(k as f64 / 3.0, 0.1 * k as f64, 0.5, 2.0, 0.1)],
                    BackgroundCoeffs::new(1, vec![0.7, 0.0, 0.0]).unwrap(),
                );
                (p, 10.0 + k as f64 / 7.0)
            })
            .collect();
        let e = Ensemble::from_scored(scored, priors, grid(), 99, 2).unwrap();
        let csv = ensemble_to_csv(&e);
        assert!(csv.starts_with("stage,chi2,weight,H1.A,H1.x,H1.y,H1.u,H1.v,H1.phi,H1.s,C_0_0,C_1_-1,C_1_1\n"));
        let back = parse_ensemble(&csv, ensemble_sidecar(&e)).unwrap();
        assert_eq!(back, e);

        let dir = tempdir();
        let path = dir.join("ens.csv");
        write_ensemble(&path, &e).unwrap();
        assert_eq!(read_ensemble(&path).unwrap(), e);
        fs::remove_dir_all(dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("rise-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }
}
