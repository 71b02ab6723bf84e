//! Binary cross-entropy and the weighted original/filtered total loss.
//!
//! Labels: 0 = real, 1 = fake. Losses are means over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the original-view term; the filtered term gets `1 - alpha`.
    pub alpha: f64,
    /// Probability clamp used when scores are given as probabilities.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config("epsilon", format!("must lie in (0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_labels(n_scores: usize, labels: &[f64]) -> Result<()> {
    if n_scores != labels.len() {
        return Err(Error::Label(format!(
            "{n_scores} scores but {} labels",
            labels.len()
        )));
    }
    if n_scores == 0 {
        return Err(Error::Label("empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Label(format!("labels must be 0 or 1, got {bad}")));
    }
    Ok(())
}

/// Mean `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[eps, 1 - eps]`.
pub fn bce_loss(scores: &[f64], labels: &[f64], epsilon: f64) -> Result<f64> {
    check_labels(scores.len(), labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(epsilon, 1.0 - epsilon);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Per-sample BCE of `sigmoid(z)` against `y`, as `max(z, 0) - z y + ln(1 + e^{-|z|})`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// d/dz of [`bce_with_logit`].
pub fn bce_logit_grad(z: f64, y: f64) -> f64 {
    sigmoid(z) - y
}

/// Mean BCE computed from logits.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<f64> {
    check_labels(logits.len(), labels)?;
    let total: f64 = logits.iter().zip(labels).map(|(&z, &y)| bce_with_logit(z, y)).sum();
    Ok(total / logits.len() as f64)
}

/// `alpha * loss_original + (1 - alpha) * loss_filtered`.
pub fn total_loss(loss_original: f64, loss_filtered: f64, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    for (key, v) in [("loss_original", loss_original), ("loss_filtered", loss_filtered)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::config(key, format!("must be finite and >= 0, got {v}")));
        }
    }
    if cfg.alpha == 1.0 {
        return Ok(loss_original);
    }
    // same value as alpha * lo + (1 - alpha) * lf, exact when lo == lf
    Ok(loss_filtered + cfg.alpha * (loss_original - loss_filtered))
}
