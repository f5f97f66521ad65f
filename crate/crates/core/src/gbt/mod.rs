//! Gradient-boosted regression trees with squared-error regression and
//! softmax multiclass modes.

mod text;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use train::{fit_classifier, fit_classifier_logged, fit_regressor, fit_regressor_logged};

/// Hessian floor used for multiclass leaf values.
pub const HESSIAN_FLOOR: f64 = 1e-6;

/// Row-major `rows x cols` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix {rows}x{cols} needs {} values, got {}",
            rows * cols,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "feature matrix contains non-finite values"
        );
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            ensure!(
                r.as_ref().len() == cols,
                "row {i} has {} features, expected {cols}",
                r.as_ref().len()
            );
            data.extend_from_slice(r.as_ref());
        }
        FeatureMatrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<FeatureMatrix> {
        ensure!(
            cols.iter().all(|&c| c < self.cols),
            "column selection out of range for {} columns",
            self.cols
        );
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        FeatureMatrix::new(self.rows, cols.len(), data)
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// How split thresholds are proposed for each feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    /// Up to `n` midpoints at quantiles of the feature distribution.
    Quantile(usize),
    /// Every midpoint between consecutive distinct values.
    AllMidpoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub candidates: Candidates,
    /// Row fraction drawn per round; 1.0 uses every row.
    pub subsample: f64,
    pub seed: u64,
    /// Stop when the held-out loss has not improved for this many rounds.
    pub early_stopping_rounds: Option<usize>,
    pub validation_fraction: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            rounds: 300,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 8,
            candidates: Candidates::Quantile(256),
            subsample: 1.0,
            seed: 0,
            early_stopping_rounds: None,
            validation_fraction: 0.1,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate <= 1.0,
            "learning rate must lie in (0, 1], got {}",
            self.learning_rate
        );
        ensure!(self.min_samples_leaf >= 1, "min_samples_leaf must be at least 1");
        ensure!(
            self.subsample > 0.0 && self.subsample <= 1.0,
            "subsample must lie in (0, 1], got {}",
            self.subsample
        );
        if let Candidates::Quantile(n) = self.candidates {
            ensure!((1..=65_535).contains(&n), "quantile candidate count must be in 1..=65535");
        }
        if self.early_stopping_rounds.is_some() {
            ensure!(
                self.validation_fraction > 0.0 && self.validation_fraction < 1.0,
                "validation_fraction must lie in (0, 1) when early stopping is on"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Regression,
    Multiclass(usize),
}

impl Mode {
    pub fn outputs(&self) -> usize {
        match *self {
            Mode::Regression => 1,
            Mode::Multiclass(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![TreeNode::Leaf { value }],
        }
    }

    pub fn predict(&self, x: &[f32]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if (x[feature] as f64) <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + rec(nodes, left).max(rec(nodes, right)),
            }
        }
        rec(&self.nodes, 0)
    }

    /// Split nodes count two parameters (feature, threshold), leaves one.
    pub fn parameter_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                TreeNode::Split { .. } => 2,
                TreeNode::Leaf { .. } => 1,
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub mode: Mode,
    /// One entry for regression, one per class for multiclass.
    pub base_score: Vec<f64>,
    /// Round-major; in multiclass mode round `r`, class `c` is `trees[r * C + c]`.
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub rounds: usize,
    pub max_depth: usize,
    pub feature_dim: usize,
}

impl TreeEnsemble {
    /// Ensemble that predicts `value` everywhere.
    pub fn constant(value: f64, feature_dim: usize) -> Self {
        TreeEnsemble {
            mode: Mode::Regression,
            base_score: vec![value],
            trees: Vec::new(),
            learning_rate: 1.0,
            rounds: 0,
            max_depth: 0,
            feature_dim,
        }
    }

    /// Regression ensemble whose outputs are `factor` times this one's.
    /// Exact when `factor` is a power of two; zero gives a constant 0.
    pub fn scaled(&self, factor: f64) -> Self {
        if factor == 0.0 {
            return TreeEnsemble::constant(0.0, self.feature_dim);
        }
        TreeEnsemble {
            base_score: self.base_score.iter().map(|b| b * factor).collect(),
            learning_rate: self.learning_rate * factor,
            ..self.clone()
        }
    }

    /// Raw additive scores for one row, one per output.
    pub fn raw_scores(&self, x: &[f32]) -> Vec<f64> {
        let k = self.mode.outputs();
        let mut s = self.base_score.clone();
        for (i, tree) in self.trees.iter().enumerate() {
            s[i % k] += self.learning_rate * tree.predict(x);
        }
        s
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        ensure!(
            cols == self.feature_dim,
            "model expects {} features, got {cols}",
            self.feature_dim
        );
        Ok(())
    }

    pub fn predict_row(&self, x: &[f32]) -> Result<f64> {
        self.check_dim(x.len())?;
        ensure!(self.mode == Mode::Regression, "predict_row needs a regression model");
        Ok(self.raw_scores(x)[0])
    }

    /// Regression outputs, unclamped.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_dim(x.cols())?;
        ensure!(self.mode == Mode::Regression, "predict needs a regression model");
        use rayon::prelude::*;
        Ok((0..x.rows())
            .into_par_iter()
            .map(|r| self.raw_scores(x.row(r))[0])
            .collect())
    }

    /// Class probabilities, one simplex per row.
    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        self.check_dim(x.cols())?;
        ensure!(
            matches!(self.mode, Mode::Multiclass(_)),
            "predict_proba needs a multiclass model"
        );
        Ok((0..x.rows()).map(|r| softmax(&self.raw_scores(x.row(r)))).collect())
    }

    pub fn predict_proba_row(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        ensure!(
            matches!(self.mode, Mode::Multiclass(_)),
            "predict_proba needs a multiclass model"
        );
        Ok(softmax(&self.raw_scores(x)))
    }

    pub fn parameter_count(&self) -> usize {
        self.base_score.len() + self.trees.iter().map(Tree::parameter_count).sum::<usize>()
    }

    pub fn to_text(&self) -> String {
        text::write(self)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        text::read(s)
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
