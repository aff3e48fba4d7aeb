//! Classification metrics.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Fraction of correct predictions.
    pub top1: f64,
    pub per_class_f1: Vec<f64>,
    /// Per-class F1 weighted by class support.
    pub weighted_f1: f64,
}

pub fn top1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let hit = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hit as f64 / labels.len() as f64)
}

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::contract("metrics over an empty set"));
    }
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    check(preds, labels)?;
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::contract(format!("class {bad} outside 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_n = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        pred_n[p] += 1;
        support[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let per_class_f1: Vec<f64> = (0..num_classes)
        .map(|c| {
            let denom = pred_n[c] + support[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let n = labels.len() as f64;
    let weighted_f1 = per_class_f1
        .iter()
        .zip(&support)
        .map(|(f, &s)| f * s as f64)
        .sum::<f64>()
        / n;
    Ok(Metrics {
        top1: top1(preds, labels)?,
        per_class_f1,
        weighted_f1,
    })
}

/// `n / Σ 1/a_i`; zero when any value is zero.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("harmonic mean of no values"));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::contract(format!("harmonic mean needs non-negative values, got {v}")));
    }
    if values.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
