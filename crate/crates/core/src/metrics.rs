//! ROC curves and the area under them.
//!
//! AUC is the Mann-Whitney statistic: the fraction of (positive, negative)
//! pairs ranked correctly, ties credited one half. It is computed by one
//! sort over the scores, and kept as an exact count of half-pairs until the
//! final division.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)`, from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold reached at each point after the first (descending).
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n_pos: usize,
    pub n_neg: usize,
}

fn validate(scores: &[f64], labels: &[bool]) -> Result<ClassCounts> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score at index {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok(ClassCounts { n_pos, n_neg })
}

/// Indices sorted by ascending score.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Groups of tied scores in ascending order as `(score, positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order(scores) {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if labels[i] {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, labels[i] as usize, (!labels[i]) as usize)),
        }
    }
    groups
}

/// Twice the Mann-Whitney U of the positives: `2 * wins + ties`.
pub fn doubled_u(scores: &[f64], labels: &[bool]) -> Result<u64> {
    validate(scores, labels)?;
    let mut neg_below = 0u64;
    let mut u2 = 0u64;
    for (_, p, q) in tie_groups(scores, labels) {
        let (p, q) = (p as u64, q as u64);
        u2 += 2 * p * neg_below + p * q;
        neg_below += q;
    }
    Ok(u2)
}

pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let counts = validate(scores, labels)?;
    let u2 = doubled_u(scores, labels)?;
    Ok(u2 as f64 / (2 * counts.n_pos * counts.n_neg) as f64)
}

pub fn class_counts(labels: &[bool]) -> ClassCounts {
    let n_pos = labels.iter().filter(|&&l| l).count();
    ClassCounts {
        n_pos,
        n_neg: labels.len() - n_pos,
    }
}

/// Sweeps the threshold down through every distinct score.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let counts = validate(scores, labels)?;
    let (np, nn) = (counts.n_pos as f64, counts.n_neg as f64);
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (s, p, q) in tie_groups(scores, labels).into_iter().rev() {
        tp += p;
        fp += q;
        points.push((fp as f64 / nn, tp as f64 / np));
        thresholds.push(s);
    }
    let auc = auc(scores, labels)?;
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

/// Trapezoidal area under a polyline of `(x, y)` points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}
