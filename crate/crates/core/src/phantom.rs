//! The software phantom: five circular hotspots and one cold spot inside a
//! uniform disk, at a configurable target-to-background ratio.
//!
//! Feature centers follow a fixed hexagonal layout (ring radius 12 mm,
//! 60 degree spacing starting on +x), labelled H1..H6 by increasing radius;
//! the 2.4 mm feature in the third slot is the cold spot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image_model::{Image, ImageGrid};

/// Activity concentration of every hotspot.
pub const HOTSPOT_ACTIVITY: f64 = 20.0;
pub const DISK_RADIUS_MM: f64 = 25.0;
/// Minimum edge-to-edge separation enforced by the layout.
pub const MIN_EDGE_SEPARATION_MM: f64 = 4.0;
pub const COLD_LABEL: &str = "COLD";

/// `(label, x, y, radius, cold)`; version 1 of the layout.
const LAYOUT_V1: [(&str, f64, f64, f64, bool); 6] = [
    ("H1", 12.0, 0.0, 1.6, false),
    ("H2", 6.0, 10.4, 2.0, false),
    (COLD_LABEL, -6.0, 10.4, 2.4, true),
    ("H4", -12.0, 0.0, 2.8, false),
    ("H5", -6.0, -10.4, 3.2, false),
    ("H6", 6.0, -10.4, 3.6, false),
];

/// Target-to-background ratio written `T:B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TbRatio {
    pub target: f64,
    pub background: f64,
}

impl TbRatio {
    pub fn new(target: f64, background: f64) -> Result<Self> {
        if !(target > 0.0 && background > 0.0 && target.is_finite() && background.is_finite()) {
            return invalid(format!("T:B ratio must be positive, got {target}:{background}"));
        }
        Ok(Self { target, background })
    }

    pub fn value(&self) -> f64 {
        self.target / self.background
    }

    /// The four ratios of the standard sweep, in decreasing order.
    pub fn standard_sweep() -> Vec<TbRatio> {
        [(4.0, 1.0), (3.0, 2.0), (2.0, 3.0), (1.0, 4.0)]
            .into_iter()
            .map(|(t, b)| TbRatio { target: t, background: b })
            .collect()
    }

    /// File-system friendly form, e.g. `4-1`.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for TbRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.target, self.background)
    }
}

impl FromStr for TbRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad T:B ratio '{s}'")))
        };
        match s.split_once(':') {
            Some((t, b)) => TbRatio::new(parse(t)?, parse(b)?),
            None => TbRatio::new(parse(s)?, 1.0),
        }
    }
}

impl TryFrom<String> for TbRatio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TbRatio> for String {
    fn from(r: TbRatio) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub activity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub layout_version: u32,
    pub tb_ratio: TbRatio,
    pub disk_radius: f64,
    pub background_activity: f64,
    pub features: Vec<Feature>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.disk_radius > 0.0) {
            return invalid("disk radius must be positive");
        }
        if !(self.background_activity >= 0.0) {
            return invalid("background activity must be nonnegative");
        }
        for f in &self.features {
            if !(f.radius > 0.0) {
                return invalid(format!("feature {} has nonpositive radius", f.label));
            }
            if f.x.hypot(f.y) + f.radius > self.disk_radius {
                return invalid(format!("feature {} extends outside the disk", f.label));
            }
        }
        for (k, a) in self.features.iter().enumerate() {
            for b in &self.features[k + 1..] {
                let gap = (a.x - b.x).hypot(a.y - b.y) - a.radius - b.radius;
                if gap <= 0.0 {
                    return invalid(format!("features {} and {} overlap", a.label, b.label));
                }
            }
        }
        Ok(())
    }

    pub fn feature(&self, label: &str) -> Option<&Feature> {
        self.features.iter().find(|f| f.label == label)
    }

    /// Activity at `(x, y)` with hard feature edges.
    pub fn activity_at(&self, x: f64, y: f64) -> f64 {
        if x * x + y * y > self.disk_radius * self.disk_radius {
            return 0.0;
        }
        self.features
            .iter()
            .find(|f| (x - f.x).powi(2) + (y - f.y).powi(2) <= f.radius * f.radius)
            .map_or(self.background_activity, |f| f.activity)
    }

    /// Closed-form integral of the activity (area-weighted).
    pub fn analytic_mass(&self) -> f64 {
        let pi = std::f64::consts::PI;
        let feature_area: f64 = self.features.iter().map(|f| pi * f.radius * f.radius).sum();
        let feature_mass: f64 = self.features.iter().map(|f| f.activity * pi * f.radius * f.radius).sum();
        self.background_activity * (pi * self.disk_radius * self.disk_radius - feature_area) + feature_mass
    }
}

/// Builds the reference phantom: hotspots at activity 20, cold spot at 0,
/// background `20 / (T:B)` on a 25 mm disk.
pub fn build_standard_phantom(tb_ratio: TbRatio) -> Result<PhantomSpec> {
    let tb = TbRatio::new(tb_ratio.target, tb_ratio.background)?;
    let features = LAYOUT_V1
        .iter()
        .map(|&(label, x, y, radius, cold)| Feature {
            label: label.to_string(),
            x,
            y,
            radius,
            activity: if cold { 0.0 } else { HOTSPOT_ACTIVITY },
        })
        .collect();
    let spec = PhantomSpec {
        layout_version: 1,
        tb_ratio: tb,
        disk_radius: DISK_RADIUS_MM,
        background_activity: HOTSPOT_ACTIVITY / tb.value(),
        features,
    };
    spec.validate()?;
    Ok(spec)
}

/// Binary-membership pixelization sampled at pixel centers.
pub fn render_phantom(p: &PhantomSpec, grid: &ImageGrid) -> Image {
    let values = (0..grid.len())
        .map(|k| {
            let (x, y) = grid.pixel_center(k);
            p.activity_at(x, y)
        })
        .collect();
    Image { grid: *grid, values }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tb(s: &str) -> TbRatio {
        s.parse().unwrap()
    }

    #[test]
    fn layout_constants() {
        let p = build_standard_phantom(tb("4:1")).unwrap();
        let mut radii: Vec<f64> = p.features.iter().filter(|f| f.activity > 0.0).map(|f| f.radius).collect();
        radii.sort_by(f64::total_cmp);
        assert_eq!(radii, vec![1.6, 2.0, 2.8, 3.2, 3.6]);
        assert_eq!(p.feature(COLD_LABEL).unwrap().radius, 2.4);
        assert_eq!(p.disk_radius, 25.0);
        for (k, a) in p.features.iter().enumerate() {
            for b in &p.features[k + 1..] {
                let gap = (a.x - b.x).hypot(a.y - b.y) - a.radius - b.radius;
                assert!(gap >= MIN_EDGE_SEPARATION_MM, "{} {}: {gap}", a.label, b.label);
            }
        }
    }

    #[test]
    fn activities_follow_ratio() {
        let p = build_standard_phantom(tb("4:1")).unwrap();
        assert_eq!(p.background_activity, 5.0);
        assert!(p.features.iter().filter(|f| f.label != COLD_LABEL).all(|f| f.activity == 20.0));
        for r in TbRatio::standard_sweep() {
            assert_eq!(build_standard_phantom(r).unwrap().feature(COLD_LABEL).unwrap().activity, 0.0);
        }
        let even = build_standard_phantom(tb("1:1")).unwrap();
        let img = render_phantom(&even, &ImageGrid::standard());
        let h1 = even.feature("H1").unwrap();
        assert_eq!(even.activity_at(h1.x, h1.y), even.activity_at(0.0, 0.0));
        assert!(img.values.iter().all(|v| *v == 0.0 || *v == 20.0));
    }

    #[test]
    fn rejects_bad_ratios() {
        assert!("0:1".parse::<TbRatio>().is_err());
        assert!("-2:1".parse::<TbRatio>().is_err());
        assert!("x:1".parse::<TbRatio>().is_err());
        assert!(TbRatio::new(1.0, 0.0).is_err());
        assert_eq!(tb("3:2").slug(), "3-2");
        assert_eq!(tb("2.5").value(), 2.5);
    }

    #[test]
    fn validation_catches_overlap_and_escape() {
        let mut p = build_standard_phantom(tb("4:1")).unwrap();
        p.features[1].x = p.features[0].x;
        p.features[1].y = p.features[0].y + 2.0;
        assert!(p.validate().is_err());
        let mut q = build_standard_phantom(tb("4:1")).unwrap();
        q.features[0].x = 24.0;
        assert!(q.validate().is_err());
    }

    #[test]
    fn rendering_hits_and_masses() {
        let grid = ImageGrid::standard();
        let p = build_standard_phantom(tb("4:1")).unwrap();
        let img = render_phantom(&p, &grid);
        for f in &p.features {
            let i = ((f.x / grid.pixel_size) + 64.0).floor() as usize;
            let j = ((f.y / grid.pixel_size) + 64.0).floor() as usize;
            assert_eq!(img.get(i, j), f.activity, "{}", f.label);
        }
        assert_eq!(img.get(0, 0), 0.0);

        let q = build_standard_phantom(tb("1:4")).unwrap();
        let img_q = render_phantom(&q, &grid);
        let area = grid.pixel_area();
        for (spec, image) in [(&p, &img), (&q, &img_q)] {
            let rendered = image.sum() * area;
            assert!((rendered - spec.analytic_mass()).abs() <= 0.02 * spec.analytic_mass());
        }
        let delta_rendered = (img_q.sum() - img.sum()) * area;
        let delta_analytic = q.analytic_mass() - p.analytic_mass();
        assert!((delta_rendered - delta_analytic).abs() <= 0.02 * delta_analytic);
    }

    #[test]
    fn truth_contrast_matches_ratio() {
        let grid = ImageGrid::standard();
        for r in TbRatio::standard_sweep() {
            let p = build_standard_phantom(r).unwrap();
            let img = render_phantom(&p, &grid);
            let h6 = p.feature("H6").unwrap();
            let (mut hot, mut n_hot, mut bg, mut n_bg) = (0.0, 0, 0.0, 0);
            for k in 0..grid.len() {
                let (x, y) = grid.pixel_center(k);
                if (x - h6.x).hypot(y - h6.y) <= h6.radius {
                    hot += img.values[k];
                    n_hot += 1;
                } else if x.hypot(y) <= p.disk_radius
                    && p.features.iter().all(|f| (x - f.x).hypot(y - f.y) > f.radius)
                {
                    bg += img.values[k];
                    n_bg += 1;
                }
            }
            let measured = (hot / n_hot as f64) / (bg / n_bg as f64);
            assert!((measured / r.value() - 1.0).abs() <= 0.01);
        }
    }

    #[test]
    fn json_round_trip() {
        let p = build_standard_phantom(tb("3:2")).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"tb_ratio\":\"3:2\""));
        assert_eq!(serde_json::from_str::<PhantomSpec>(&s).unwrap(), p);
    }
}
