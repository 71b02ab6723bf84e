//! Accuracy and average precision. Positives are fakes (label 1).

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Label(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Label(format!("labels must be 0 or 1, got {bad}")));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Label(format!("score {bad} is not a number")));
    }
    Ok(())
}

/// Percentage of samples where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::EmptyResult("accuracy of an empty set".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == (y == 1))
        .count();
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// Area under the precision-recall curve as a step sum: for every distinct
/// score, taken as a threshold from high to low, the recall gained times the
/// precision at that threshold. Without ties this is the mean precision at
/// each positive's rank. Returns a value in `[0, 1]`.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateAp(format!(
            "{positives} positive(s) among {} samples; need both classes",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut gained = 0;
        while i < order.len() && scores[order[i]] == s {
            gained += usize::from(labels[order[i]] == 1);
            seen += 1;
            i += 1;
        }
        tp += gained;
        if gained > 0 {
            ap += gained as f64 / positives as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}
