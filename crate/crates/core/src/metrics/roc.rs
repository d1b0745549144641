//! One-vs-rest ROC and precision-recall curves with trapezoidal areas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Points in sweep order and the trapezoidal area under them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryCurves {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc: Curve,
    /// `(recall, precision)`, starting at `(0, 1)`.
    pub pr: Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPrReport {
    /// `None` for a class with no positive or no negative sample.
    pub per_class: Vec<Option<BinaryCurves>>,
    pub micro: Option<BinaryCurves>,
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum()
}

/// Sweeps the threshold over every distinct score, high to low, predicting
/// positive when `score ≥ threshold`.
pub fn binary_curves(scored: &[(f32, bool)]) -> Option<BinaryCurves> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut roc = vec![(0.0, 0.0)];
    let mut pr = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        pr.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Some(BinaryCurves {
        roc: Curve {
            auc: trapezoid(&roc),
            points: roc,
        },
        pr: Curve {
            auc: trapezoid(&pr),
            points: pr,
        },
    })
}

/// `scores` is `[N×K]` with rows summing to 1 within 1e-5.
pub fn roc_pr_curves(scores: &DenseTensor, labels: &[usize]) -> Result<RocPrReport> {
    let (n, k) = scores.rows_cols();
    if scores.shape().len() != 2 || n != labels.len() {
        return Err(Error::shape(
            "roc_pr_curves",
            format!("scores {:?} for {} labels", scores.shape(), labels.len()),
        ));
    }
    for r in 0..n {
        let s: f64 = scores.row(r).iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::config(format!("score row {r} sums to {s}, not 1")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::config(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut all = Vec::with_capacity(n * k);
    let per_class = (0..k)
        .map(|c| {
            let scored: Vec<(f32, bool)> =
                (0..n).map(|r| (scores.row(r)[c], labels[r] == c)).collect();
            all.extend_from_slice(&scored);
            binary_curves(&scored)
        })
        .collect();
    Ok(RocPrReport {
        per_class,
        micro: binary_curves(&all),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_chance() {
        let perfect = [(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        let c = binary_curves(&perfect).unwrap();
        assert_eq!(c.roc.auc, 1.0);
        assert_eq!(c.pr.auc, 1.0);
        let constant = [(0.5, true), (0.5, false), (0.5, false)];
        assert_eq!(binary_curves(&constant).unwrap().roc.auc, 0.5);
    }

    #[test]
    fn absent_class_is_undefined() {
        let s = DenseTensor::from_rows(&[&[0.7, 0.2, 0.1], &[0.1, 0.8, 0.1]]).unwrap();
        let r = roc_pr_curves(&s, &[0, 1]).unwrap();
        assert!(r.per_class[2].is_none());
        assert_eq!(r.per_class[0].as_ref().unwrap().roc.auc, 1.0);
        assert!(r.micro.is_some());
    }

    #[test]
    fn rows_must_be_distributions() {
        let s = DenseTensor::from_rows(&[&[0.7, 0.7]]).unwrap();
        assert!(roc_pr_curves(&s, &[0]).is_err());
    }
}
