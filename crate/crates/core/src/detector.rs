//! Multi-expert detection: score every view with its own expert, add the
//! scores in the fixed loop order and map the merged score to a label.
//!
//! The loop runs five iterations. The first adds the scores of expert 1 on
//! view 1 and expert 6 on the original image; iterations two to five add one
//! filtered expert each. After every iteration the loop stops unless the
//! running sum is still at or above the early-exit threshold. A threshold of
//! minus infinity disables the early exit.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::evalkit::Scorer;
use crate::filterbank::FilterBank;
use crate::hyperlora::ORIGINAL_EXPERT;
use crate::imaging::Image;
use crate::model::HyperDetModel;
use crate::nn::sigmoid;
use crate::tensors::{sha256_hex, ParamGroup};

/// How per-expert outputs are added up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    /// Sum of sigmoid probabilities.
    #[default]
    Probability,
    /// Sum of logits; the normalized score is the sigmoid of their mean.
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub merged_score: f64,
    /// Scores in evaluation order; see `experts`.
    pub per_expert_scores: Vec<f64>,
    pub experts: Vec<usize>,
    /// Loop iterations run (1..=5).
    pub experts_evaluated: usize,
    /// Merged score mapped back to `[0, 1]`; fake iff `>= 0.5`.
    pub normalized_score: f64,
    pub label: Label,
    #[serde(with = "threshold_repr")]
    pub threshold_used: f64,
    pub merge: MergeMode,
}

/// Non-finite thresholds are written as the strings `"inf"` / `"-inf"`.
mod threshold_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Text("-inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Default order of the filtered experts after the first iteration.
pub const DEFAULT_ORDER: [usize; 4] = [2, 3, 4, 5];

#[derive(Debug, Clone)]
pub struct DetectorModel {
    model: HyperDetModel,
    bank: FilterBank,
    checkpoint_hash: String,
    pub merge: MergeMode,
}

impl DetectorModel {
    pub fn from_model(model: HyperDetModel, bank: FilterBank) -> Self {
        let checkpoint_hash = sha256_hex(
            format!("{}{}{}", model.backbone.digest(), model.trainable.digest(), bank.to_text()).as_bytes(),
        );
        Self {
            model,
            bank,
            checkpoint_hash,
            merge: MergeMode::default(),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(dir)?;
        Ok(Self {
            model: ck.model,
            bank: ck.bank,
            checkpoint_hash: ck.hash,
            merge: MergeMode::default(),
        })
    }

    pub fn model(&self) -> &HyperDetModel {
        &self.model
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn detect(&self, image: &Image, threshold: f64) -> Result<Verdict> {
        self.detect_ordered(image, threshold, DEFAULT_ORDER)
    }

    /// As [`DetectorModel::detect`] with experts 2..=5 visited in `order`.
    pub fn detect_ordered(&self, image: &Image, threshold: f64, order: [usize; 4]) -> Result<Verdict> {
        if threshold.is_nan() {
            return Err(Error::config("threshold", "must not be NaN"));
        }
        let mut sorted = order;
        sorted.sort_unstable();
        if sorted != DEFAULT_ORDER {
            return Err(Error::config("order", format!("must be a permutation of 2..=5, got {order:?}")));
        }
        let views = self.model.views(image, &self.bank)?;
        let score = |expert: usize| -> Result<f64> {
            let z = self.model.logit(&views[expert - 1], expert)?;
            Ok(match self.merge {
                MergeMode::Probability => sigmoid(z),
                MergeMode::Logit => z,
            })
        };
        let schedule: [&[usize]; 5] = [
            &[1, ORIGINAL_EXPERT],
            &order[0..1],
            &order[1..2],
            &order[2..3],
            &order[3..4],
        ];
        let mut merged = 0.0;
        let mut scores = Vec::with_capacity(6);
        let mut experts = Vec::with_capacity(6);
        let mut iterations = 0;
        for step in schedule {
            for &e in step {
                let s = score(e)?;
                merged += s;
                scores.push(s);
                experts.push(e);
            }
            iterations += 1;
            if !(merged >= threshold) {
                break;
            }
        }
        let mean = merged / scores.len() as f64;
        let normalized = match self.merge {
            MergeMode::Probability => mean,
            MergeMode::Logit => sigmoid(mean),
        };
        Ok(Verdict {
            merged_score: merged,
            per_expert_scores: scores,
            experts,
            experts_evaluated: iterations,
            normalized_score: normalized,
            label: if normalized >= 0.5 { Label::Fake } else { Label::Real },
            threshold_used: threshold,
            merge: self.merge,
        })
    }

    /// Detects every path, keeping input order. Unreadable files become
    /// inline error records; the call only fails when nothing could be scored.
    pub fn detect_batch(&self, paths: &[PathBuf], threshold: f64) -> Result<BatchReport> {
        let records: Vec<BatchRecord> = paths
            .par_iter()
            .map(|path| {
                let outcome = Image::open(path).and_then(|img| self.detect(&img, threshold));
                match outcome {
                    Ok(v) => BatchRecord {
                        path: path.clone(),
                        verdict: Some(v),
                        error: None,
                    },
                    Err(e) => BatchRecord {
                        path: path.clone(),
                        verdict: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        let ok = records.iter().filter(|r| r.verdict.is_some()).count();
        if ok == 0 {
            return Err(Error::EmptyResult(format!("none of {} input(s) could be scored", paths.len())));
        }
        let fake = records
            .iter()
            .filter(|r| r.verdict.as_ref().is_some_and(|v| v.label == Label::Fake))
            .count();
        Ok(BatchReport {
            summary: BatchSummary {
                total: records.len(),
                scored: ok,
                failed: records.len() - ok,
                fake,
                real: ok - fake,
            },
            records,
        })
    }
}

impl Scorer for DetectorModel {
    fn score(&self, image: &Image) -> Result<f64> {
        Ok(self.detect(image, f64::NEG_INFINITY)?.normalized_score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    pub scored: usize,
    pub failed: usize,
    pub fake: usize,
    pub real: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub records: Vec<BatchRecord>,
    pub summary: BatchSummary,
}
