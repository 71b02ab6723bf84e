//! Evaluation: per-generator accuracy and AP, robustness sweeps and spectra.

mod metrics;
mod perturb;
mod plot;
mod spectrum;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{accuracy, average_precision};
pub use perturb::{perturb, robustness_sweep, write_sweep_artifacts, Perturbation, SweepGrid};
pub use plot::{line_plot, Series};
pub use spectrum::{average_spectrum, fft2, low_band_box, Spectrum};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Decision boundary on normalized scores; ties are fake.
pub const DECISION_BOUNDARY: f64 = 0.5;

/// Anything that maps an image to a score in `[0, 1]` (higher = more likely fake).
pub trait Scorer {
    fn score(&self, image: &Image) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetrics {
    pub generator: String,
    pub n_real: usize,
    pub n_fake: usize,
    /// Percent.
    pub accuracy: f64,
    /// Percent; `None` when the generator has a single class.
    pub ap: Option<f64>,
    pub ap_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generators: Vec<GeneratorMetrics>,
    /// Mean of per-generator accuracies.
    pub avg_acc: f64,
    /// Mean of the non-degenerate per-generator APs.
    pub map: Option<f64>,
    pub perturbation: Option<Perturbation>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Builds a report from `(generator, scores, labels)` groups.
    pub fn from_groups(
        groups: &[(String, Vec<f64>, Vec<u8>)],
        perturbation: Option<Perturbation>,
        config: serde_json::Value,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::EmptyResult("no generators to report".into()));
        }
        let mut generators = Vec::with_capacity(groups.len());
        for (name, scores, labels) in groups {
            let acc = accuracy(scores, labels, DECISION_BOUNDARY)?;
            let ap = match average_precision(scores, labels) {
                Ok(ap) => Some(100.0 * ap),
                Err(Error::DegenerateAp(_)) => None,
                Err(e) => return Err(e),
            };
            generators.push(GeneratorMetrics {
                generator: name.clone(),
                n_real: labels.iter().filter(|&&y| y == 0).count(),
                n_fake: labels.iter().filter(|&&y| y == 1).count(),
                accuracy: acc,
                ap,
                ap_degenerate: ap.is_none(),
            });
        }
        let avg_acc = generators.iter().map(|g| g.accuracy).sum::<f64>() / generators.len() as f64;
        let aps: Vec<f64> = generators.iter().filter_map(|g| g.ap).collect();
        let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        Ok(Self {
            generators,
            avg_acc,
            map,
            perturbation,
            config,
        })
    }

    /// True when every metric matches exactly, ignoring the descriptor and config.
    pub fn same_metrics(&self, other: &MetricsReport) -> bool {
        self.generators == other.generators && self.avg_acc == other.avg_acc && self.map == other.map
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let width = self
            .generators
            .iter()
            .map(|g| g.generator.len())
            .chain(["generator".len(), "mean".len()])
            .max()
            .unwrap_or(9);
        let mut out = String::new();
        if let Some(p) = self.perturbation {
            let _ = writeln!(out, "perturbation: {p}");
        }
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7}", "generator", "real", "fake", "acc", "AP");
        for g in &self.generators {
            let ap = g.ap.map(|v| format!("{v:7.2}")).unwrap_or_else(|| "    n/a".into());
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>6.2}  {}",
                g.generator, g.n_real, g.n_fake, g.accuracy, ap
            );
        }
        let map = self.map.map(|v| format!("{v:7.2}")).unwrap_or_else(|| "    n/a".into());
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6.2}  {}", "mean", "", "", self.avg_acc, map);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("generator,n_real,n_fake,accuracy,ap\n");
        for g in &self.generators {
            let ap = g.ap.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", g.generator, g.n_real, g.n_fake, g.accuracy, ap);
        }
        out
    }
}

/// Scores every sample (optionally perturbed first) and reports per-generator
/// metrics. Scoring runs in parallel; aggregation keeps dataset order.
pub fn evaluate<S: Scorer + Sync>(
    scorer: &S,
    dataset: &Dataset,
    perturbation: Option<Perturbation>,
    config: &serde_json::Value,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Ingestion {
            message: "evaluation dataset is empty".into(),
            paths: Vec::new(),
        });
    }
    let scores: Vec<f64> = dataset
        .samples
        .par_iter()
        .map(|s| match perturbation {
            Some(p) => scorer.score(&p.apply(&s.image)?),
            None => scorer.score(&s.image),
        })
        .collect::<Result<_>>()?;
    let mut groups: Vec<(String, Vec<f64>, Vec<u8>)> = Vec::new();
    for (s, score) in dataset.samples.iter().zip(scores) {
        match groups.last_mut() {
            Some((g, sc, lb)) if *g == s.generator => {
                sc.push(score);
                lb.push(s.label);
            }
            _ => groups.push((s.generator.clone(), vec![score], vec![s.label])),
        }
    }
    MetricsReport::from_groups(&groups, perturbation, config.clone())
}
