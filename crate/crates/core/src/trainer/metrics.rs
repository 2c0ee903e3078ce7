use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// Macro F1 over the positive and negative class of one label.
    #[serde(rename = "scoreA")]
    ScoreA,
    /// Support-weighted F1 over several labels.
    #[serde(rename = "scoreB")]
    ScoreB,
}

impl Metric {
    /// scoreA for single-label tasks, scoreB otherwise.
    pub fn for_labels(n: usize) -> Self {
        if n == 1 {
            Metric::ScoreA
        } else {
            Metric::ScoreB
        }
    }
}

/// F1 from confusion counts; 0 when undefined.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn counts(probs: &[f64], labels: &[u8], threshold: f64, positive: bool) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &y) in probs.iter().zip(labels) {
        let pred = (p >= threshold) == positive;
        let truth = (y == 1) == positive;
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

fn check(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::data(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::data("labels must be binary"));
    }
    Ok(())
}

pub fn score_a(probs: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::data("scoreA of an empty set"));
    }
    let (tp, fp, fn_) = counts(probs, labels, threshold, true);
    let (tp_n, fp_n, fn_n) = counts(probs, labels, threshold, false);
    Ok((f1(tp, fp, fn_) + f1(tp_n, fp_n, fn_n)) / 2.0)
}

/// `probs[i][c]` and `labels[i][c]` for instance `i` and label `c`.
pub fn score_b(probs: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::data(format!("{} prediction rows for {} label rows", probs.len(), labels.len())));
    }
    let c = labels[0].len();
    let (mut weighted, mut support) = (0.0, 0usize);
    for cls in 0..c {
        let p: Vec<f64> = probs.iter().map(|r| r.get(cls).copied().unwrap_or(f64::NAN)).collect();
        let y: Vec<u8> = labels.iter().map(|r| r.get(cls).copied().unwrap_or(2)).collect();
        check(&p, &y)?;
        let s = y.iter().filter(|&&v| v == 1).count();
        let (tp, fp, fn_) = counts(&p, &y, threshold, true);
        weighted += s as f64 * f1(tp, fp, fn_);
        support += s;
    }
    if support == 0 {
        return Err(Error::data("scoreB needs at least one positive instance"));
    }
    Ok(weighted / support as f64)
}
