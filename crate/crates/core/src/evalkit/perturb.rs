//! Test-time degradations and the blur/JPEG robustness grid.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plot::{line_plot, Series};
use super::{evaluate, MetricsReport, Scorer};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "lowercase")]
pub enum Perturbation {
    Identity,
    /// Gaussian blur with this sigma.
    Blur(f64),
    /// JPEG re-encoding at this quality.
    Jpeg(u8),
}

impl Perturbation {
    pub fn apply(&self, image: &Image) -> Result<Image> {
        perturb(image, *self)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::Identity => "identity",
            Perturbation::Blur(_) => "blur",
            Perturbation::Jpeg(_) => "jpeg",
        }
    }

    pub fn param(&self) -> Option<f64> {
        match *self {
            Perturbation::Identity => None,
            Perturbation::Blur(s) => Some(s),
            Perturbation::Jpeg(q) => Some(f64::from(q)),
        }
    }

    /// Parses `identity`, `blur:<sigma>` or `jpeg:<quality>`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::config("perturb", msg);
        let text = text.trim();
        if text == "identity" || text == "none" {
            return Ok(Perturbation::Identity);
        }
        let (kind, value) = text
            .split_once(':')
            .ok_or_else(|| bad(format!("expected blur:<sigma> or jpeg:<quality>, got `{text}`")))?;
        match kind {
            "blur" => {
                let s: f64 = value.parse().map_err(|_| bad(format!("bad sigma `{value}`")))?;
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(bad(format!("sigma must be finite and >= 0, got {s}")));
                }
                Ok(Perturbation::Blur(s))
            }
            "jpeg" => {
                let q: u8 = value.parse().map_err(|_| bad(format!("bad quality `{value}`")))?;
                if !(1..=100).contains(&q) {
                    return Err(bad(format!("quality must lie in 1..=100, got {q}")));
                }
                Ok(Perturbation::Jpeg(q))
            }
            other => Err(bad(format!("unknown perturbation `{other}`"))),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Identity => write!(f, "identity"),
            Perturbation::Blur(s) => write!(f, "blur:{s}"),
            Perturbation::Jpeg(q) => write!(f, "jpeg:{q}"),
        }
    }
}

/// Applies one degradation. Blur uses a Gaussian truncated at `ceil(3 sigma)`;
/// JPEG encodes at the quality and decodes back.
pub fn perturb(image: &Image, p: Perturbation) -> Result<Image> {
    match p {
        Perturbation::Identity => Ok(image.clone()),
        Perturbation::Blur(sigma) => {
            if !(0.0..=4.0).contains(&sigma) {
                log::warn!("blur sigma {sigma} is outside the tested range 0..=4");
            }
            Ok(image.gaussian_blur(sigma))
        }
        Perturbation::Jpeg(q) => {
            if !(30..=100).contains(&q) {
                log::warn!("jpeg quality {q} is outside the tested range 30..=100");
            }
            image
                .jpeg_roundtrip(q)
                .map_err(|e| Error::PerturbCodec(e.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub blur: Vec<f64>,
    pub jpeg: Vec<u8>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            blur: vec![1.0, 2.0, 3.0, 4.0],
            jpeg: vec![90, 80, 70, 60, 50, 40, 30],
        }
    }
}

impl SweepGrid {
    pub fn empty() -> Self {
        Self {
            blur: Vec::new(),
            jpeg: Vec::new(),
        }
    }

    pub fn points(&self) -> Vec<Perturbation> {
        self.blur
            .iter()
            .map(|&s| Perturbation::Blur(s))
            .chain(self.jpeg.iter().map(|&q| Perturbation::Jpeg(q)))
            .collect()
    }

    /// Parses `blur=1,2,3` and `jpeg=90,80` terms; kinds not mentioned are empty.
    pub fn parse<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let mut grid = Self::empty();
        for term in terms {
            let term = term.as_ref();
            let (kind, values) = term
                .split_once('=')
                .ok_or_else(|| Error::config("grid", format!("expected kind=v1,v2,..., got `{term}`")))?;
            for v in values.split(',').filter(|v| !v.is_empty()) {
                match Perturbation::parse(&format!("{kind}:{v}"))? {
                    Perturbation::Blur(s) => grid.blur.push(s),
                    Perturbation::Jpeg(q) => grid.jpeg.push(q),
                    Perturbation::Identity => {}
                }
            }
        }
        Ok(grid)
    }
}

/// One report per grid point, in grid order.
pub fn robustness_sweep<S: Scorer + Sync>(
    scorer: &S,
    dataset: &Dataset,
    points: &[Perturbation],
    config: &serde_json::Value,
) -> Result<Vec<MetricsReport>> {
    points
        .iter()
        .map(|p| evaluate(scorer, dataset, Some(*p), config))
        .collect()
}

/// Writes `sweep.csv` and one line plot per perturbation kind and metric.
pub fn write_sweep_artifacts(reports: &[MetricsReport], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut csv = String::from("kind,param,generator,accuracy,ap\n");
    for r in reports {
        let (kind, param) = describe(r);
        for g in &r.generators {
            csv.push_str(&format!("{kind},{param},{},{},{}\n", g.generator, g.accuracy, opt(g.ap)));
        }
        csv.push_str(&format!("{kind},{param},avg_acc,{},\n", r.avg_acc));
        csv.push_str(&format!("{kind},{param},mAP,,{}\n", opt(r.map)));
    }
    let path = dir.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    for kind in ["blur", "jpeg"] {
        let points: Vec<&MetricsReport> = reports
            .iter()
            .filter(|r| r.perturbation.map(|p| p.kind()) == Some(kind))
            .collect();
        if points.is_empty() {
            continue;
        }
        let xs: Vec<f64> = points.iter().map(|r| r.perturbation.and_then(|p| p.param()).unwrap_or(0.0)).collect();
        for (metric, ys) in [
            ("acc", points.iter().map(|r| r.avg_acc).collect::<Vec<_>>()),
            ("map", points.iter().map(|r| r.map.unwrap_or(f64::NAN)).collect()),
        ] {
            let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys).filter(|(_, y)| y.is_finite()).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let img = line_plot(&[Series { points: pts }], (0.0, 100.0));
            let path = dir.join(format!("{kind}_{metric}.png"));
            img.save(&path).map_err(|source| Error::Decode {
                path: path.clone(),
                source,
            })?;
            written.push(path);
        }
    }
    Ok(written)
}

fn describe(r: &MetricsReport) -> (&'static str, String) {
    match r.perturbation {
        None => ("none", String::new()),
        Some(p) => (p.kind(), p.param().map(|v| v.to_string()).unwrap_or_default()),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_the_tested_settings() {
        let g = SweepGrid::default();
        assert_eq!(g.blur, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.jpeg, vec![90, 80, 70, 60, 50, 40, 30]);
        assert_eq!(g.points().len(), 11);
        assert!(SweepGrid::empty().points().is_empty());
    }

    #[test]
    fn parsing() {
        assert_eq!(Perturbation::parse("blur:2").unwrap(), Perturbation::Blur(2.0));
        assert_eq!(Perturbation::parse("jpeg:70").unwrap(), Perturbation::Jpeg(70));
        assert!(Perturbation::parse("jpeg:0").is_err());
        assert!(Perturbation::parse("sharpen:1").is_err());
        let g = SweepGrid::parse(&["blur=1,2", "jpeg=90"]).unwrap();
        assert_eq!(g.points(), vec![Perturbation::Blur(1.0), Perturbation::Blur(2.0), Perturbation::Jpeg(90)]);
    }

    #[test]
    fn tiny_blur_is_identity() {
        let img = Image::from_fn(6, 6, 3, |(y, x, c)| ((y * 3 + x + c) % 5) as f64 / 5.0);
        let out = perturb(&img, Perturbation::Blur(1e-3)).unwrap();
        let diff = (out.data() - img.data()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-6);
    }
}
