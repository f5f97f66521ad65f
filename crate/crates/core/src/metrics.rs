//! Overlap metrics for binary masks and classification scores.

use serde::Serialize;

use crate::error::{ensure, Result};

fn overlap_counts(pred: &[bool], gt: &[bool]) -> Result<(usize, usize, usize)> {
    ensure!(
        pred.len() == gt.len(),
        "mask sizes differ: {} vs {}",
        pred.len(),
        gt.len()
    );
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    Ok((inter, np, ng))
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

/// `|P∩G| / |P∪G|`; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_labels(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        ensure!(
            truth.len() == pred.len(),
            "label counts differ: {} vs {}",
            truth.len(),
            pred.len()
        );
        let mut m = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            ensure!(t < classes && p < classes, "label out of range for {classes} classes");
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        ensure!(total > 0, "accuracy of an empty confusion matrix is undefined");
        Ok((0..self.classes).map(|c| self.counts[c][c]).sum::<usize>() as f64 / total as f64)
    }

    /// Per-class recall; `None` for classes with no true samples.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect()
    }

    /// Unweighted mean of per-class recalls. Every class needs support.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        let r = self.recalls();
        if let Some(c) = r.iter().position(Option::is_none) {
            return Err(crate::Error::invalid(format!(
                "class {c} has no true samples; balanced accuracy is undefined"
            )));
        }
        Ok(r.iter().flatten().sum::<f64>() / self.classes as f64)
    }
}

pub fn accuracy(truth: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    ConfusionMatrix::from_labels(truth, pred, classes)?.accuracy()
}

pub fn balanced_accuracy(truth: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    ConfusionMatrix::from_labels(truth, pred, classes)?.balanced_accuracy()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Summary {
    /// Quartiles use linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Result<Self> {
        ensure!(!values.is_empty(), "cannot summarise an empty set");
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}
