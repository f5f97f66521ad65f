use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{softmax, Candidates, FeatureMatrix, GbtParams, Mode, Tree, TreeEnsemble, TreeNode, HESSIAN_FLOOR};
use crate::error::{ensure, Error, Result};

/// Features binned against their candidate thresholds, column-major.
struct BinnedFeatures {
    rows: usize,
    thresholds: Vec<Vec<f64>>,
    codes: Vec<u16>,
}

impl BinnedFeatures {
    fn build(x: &FeatureMatrix, candidates: Candidates) -> Result<Self> {
        let rows = x.rows();
        let per_feature: Vec<(Vec<f64>, Vec<u16>)> = (0..x.cols())
            .into_par_iter()
            .map(|f| {
                let values: Vec<f64> = (0..rows).map(|r| x.row(r)[f] as f64).collect();
                let thresholds = candidate_thresholds(&values, candidates)?;
                let codes = values
                    .iter()
                    .map(|&v| thresholds.partition_point(|&t| t < v) as u16)
                    .collect();
                Ok((thresholds, codes))
            })
            .collect::<Result<_>>()?;
        let mut thresholds = Vec::with_capacity(x.cols());
        let mut codes = Vec::with_capacity(x.cols() * rows);
        for (t, c) in per_feature {
            thresholds.push(t);
            codes.extend_from_slice(&c);
        }
        Ok(BinnedFeatures {
            rows,
            thresholds,
            codes,
        })
    }

    #[inline]
    fn column(&self, f: usize) -> &[u16] {
        &self.codes[f * self.rows..(f + 1) * self.rows]
    }

    fn cols(&self) -> usize {
        self.thresholds.len()
    }
}

/// Split thresholds for one feature: midpoints between consecutive distinct
/// values, all of them or those at quantile ranks.
fn candidate_thresholds(values: &[f64], candidates: Candidates) -> Result<Vec<f64>> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut distinct = sorted.clone();
    distinct.dedup();
    let mid = |i: usize| 0.5 * (distinct[i] + distinct[i + 1]);
    match candidates {
        Candidates::AllMidpoints => {
            ensure!(
                distinct.len() <= 65_536,
                "feature has {} distinct values; at most 65536 are supported",
                distinct.len()
            );
            Ok((0..distinct.len().saturating_sub(1)).map(mid).collect())
        }
        Candidates::Quantile(max) => {
            if distinct.len() <= max + 1 {
                return Ok((0..distinct.len().saturating_sub(1)).map(mid).collect());
            }
            let n = sorted.len();
            let mut out: Vec<f64> = Vec::with_capacity(max);
            for q in 1..=max {
                let v = sorted[(q * n / (max + 1)).min(n - 1)];
                let i = distinct.partition_point(|&d| d < v);
                if i + 1 < distinct.len() {
                    let t = mid(i);
                    if out.last().map_or(true, |&last| t > last) {
                        out.push(t);
                    }
                }
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Copy)]
struct Bin {
    sum: f64,
    hess: f64,
    count: u32,
}

const EMPTY_BIN: Bin = Bin {
    sum: 0.0,
    hess: 0.0,
    count: 0,
};

type Histogram = Vec<Vec<Bin>>;

struct SplitCandidate {
    gain: f64,
    feature: usize,
    bin: usize,
}

struct Grower<'a> {
    binned: &'a BinnedFeatures,
    targets: &'a [f64],
    hessians: Option<&'a [f64]>,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn histogram(&self, rows: &[u32]) -> Histogram {
        (0..self.binned.cols())
            .into_par_iter()
            .map(|f| {
                let mut h = vec![EMPTY_BIN; self.binned.thresholds[f].len() + 1];
                let col = self.binned.column(f);
                for &r in rows {
                    let b = &mut h[col[r as usize] as usize];
                    b.sum += self.targets[r as usize];
                    if let Some(hs) = self.hessians {
                        b.hess += hs[r as usize];
                    }
                    b.count += 1;
                }
                h
            })
            .collect()
    }

    fn best_split(&self, hist: &Histogram, total: Bin) -> Option<SplitCandidate> {
        let parent = total.sum * total.sum / total.count as f64;
        let per_feature: Vec<Option<SplitCandidate>> = hist
            .par_iter()
            .enumerate()
            .map(|(f, bins)| {
                let mut best: Option<SplitCandidate> = None;
                let (mut sl, mut nl) = (0.0, 0u32);
                for (j, b) in bins.iter().enumerate().take(bins.len().saturating_sub(1)) {
                    sl += b.sum;
                    nl += b.count;
                    let nr = total.count - nl;
                    if (nl as usize) < self.min_leaf {
                        continue;
                    }
                    if (nr as usize) < self.min_leaf {
                        break;
                    }
                    let sr = total.sum - sl;
                    let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - parent;
                    if gain > best.as_ref().map_or(0.0, |c| c.gain) {
                        best = Some(SplitCandidate {
                            gain,
                            feature: f,
                            bin: j,
                        });
                    }
                }
                best
            })
            .collect();
        // Ties keep the lowest feature index.
        per_feature.into_iter().flatten().fold(None, |acc: Option<SplitCandidate>, c| match acc {
            Some(a) if a.gain >= c.gain => Some(a),
            _ => Some(c),
        })
    }

    fn leaf_value(&self, total: Bin) -> f64 {
        match self.hessians {
            None => total.sum / total.count as f64,
            Some(_) => total.sum / total.hess.max(HESSIAN_FLOOR),
        }
    }

    /// Grows the subtree for `rows`, returning its node index.
    fn grow(&mut self, rows: Vec<u32>, hist: Histogram, depth: usize) -> usize {
        let total = hist[0].iter().fold(EMPTY_BIN, |a, b| Bin {
            sum: a.sum + b.sum,
            hess: a.hess + b.hess,
            count: a.count + b.count,
        });
        let split = if depth < self.max_depth && rows.len() >= 2 * self.min_leaf {
            self.best_split(&hist, total)
        } else {
            None
        };
        let id = self.nodes.len();
        let Some(split) = split else {
            self.nodes.push(TreeNode::Leaf {
                value: self.leaf_value(total),
            });
            return id;
        };
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        let col = self.binned.column(split.feature);
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
            rows.iter().partition(|&&r| (col[r as usize] as usize) <= split.bin);
        drop(rows);
        // Build the smaller child's histogram; derive the other by subtraction.
        let (small, small_is_left) = if left_rows.len() <= right_rows.len() {
            (&left_rows, true)
        } else {
            (&right_rows, false)
        };
        let small_hist = self.histogram(small);
        let large_hist: Histogram = hist
            .into_iter()
            .zip(&small_hist)
            .map(|(p, s)| {
                p.into_iter()
                    .zip(s)
                    .map(|(a, b)| Bin {
                        sum: a.sum - b.sum,
                        hess: a.hess - b.hess,
                        count: a.count - b.count,
                    })
                    .collect()
            })
            .collect();
        let (left_hist, right_hist) = if small_is_left {
            (small_hist, large_hist)
        } else {
            (large_hist, small_hist)
        };
        let left = self.grow(left_rows, left_hist, depth + 1);
        let right = self.grow(right_rows, right_hist, depth + 1);
        self.nodes[id] = TreeNode::Split {
            feature: split.feature,
            threshold: self.binned.thresholds[split.feature][split.bin],
            left,
            right,
        };
        id
    }
}

/// Grows one tree on `targets` over `rows`.
fn grow_tree(
    binned: &BinnedFeatures,
    targets: &[f64],
    hessians: Option<&[f64]>,
    rows: Vec<u32>,
    params: &GbtParams,
) -> Tree {
    let mut grower = Grower {
        binned,
        targets,
        hessians,
        max_depth: params.max_depth,
        min_leaf: params.min_samples_leaf,
        nodes: Vec::new(),
    };
    let hist = grower.histogram(&rows);
    grower.grow(rows, hist, 0);
    Tree { nodes: grower.nodes }
}

/// Evaluates a tree on binned training rows (identical to threshold
/// comparison on the raw values).
fn predict_binned(tree: &Tree, binned: &BinnedFeatures, row: usize) -> f64 {
    let mut i = 0;
    loop {
        match tree.nodes[i] {
            TreeNode::Leaf { value } => return value,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let code = binned.column(feature)[row] as usize;
                let t = &binned.thresholds[feature];
                // code <= bin index of `threshold` <=> value <= threshold
                let bin = t.partition_point(|&x| x < threshold);
                i = if code <= bin { left } else { right };
            }
        }
    }
}

fn check_inputs(x: &FeatureMatrix, n: usize, params: &GbtParams) -> Result<()> {
    params.validate()?;
    ensure!(x.rows() > 0, "training data is empty");
    ensure!(x.cols() > 0, "training data has no features");
    ensure!(
        x.rows() == n,
        "feature matrix has {} rows but {} targets were given",
        x.rows(),
        n
    );
    Ok(())
}

struct RowPlan {
    train: Vec<u32>,
    valid: Vec<u32>,
}

fn plan_rows(n: usize, params: &GbtParams) -> RowPlan {
    if params.early_stopping_rounds.is_none() {
        return RowPlan {
            train: (0..n as u32).collect(),
            valid: Vec::new(),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5EED_0000_0000_0001);
    let nv = ((n as f64 * params.validation_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut valid: Vec<u32> = sample(&mut rng, n, nv).into_iter().map(|i| i as u32).collect();
    valid.sort_unstable();
    let mut is_valid = vec![false; n];
    valid.iter().for_each(|&i| is_valid[i as usize] = true);
    let train = (0..n as u32).filter(|&i| !is_valid[i as usize]).collect();
    RowPlan { train, valid }
}

fn round_rows(train: &[u32], params: &GbtParams, round: usize) -> Vec<u32> {
    if params.subsample >= 1.0 {
        return train.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let m = ((train.len() as f64 * params.subsample).ceil() as usize).clamp(1, train.len());
    let mut picked: Vec<u32> = sample(&mut rng, train.len(), m).into_iter().map(|i| train[i]).collect();
    picked.sort_unstable();
    picked
}

struct EarlyStop {
    patience: usize,
    best: f64,
    best_round: usize,
}

impl EarlyStop {
    /// Returns true when training should stop after `round` (0-based).
    fn update(&mut self, round: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_round = round + 1;
        }
        round + 1 - self.best_round >= self.patience
    }
}

/// Squared-error boosting; returns the per-round training MSE alongside the
/// model (index 0 is the base-score MSE).
pub fn fit_regressor_logged(x: &FeatureMatrix, y: &[f64], params: &GbtParams) -> Result<(TreeEnsemble, Vec<f64>)> {
    check_inputs(x, y.len(), params)?;
    ensure!(y.iter().all(|v| v.is_finite()), "regression targets must be finite");
    let binned = BinnedFeatures::build(x, params.candidates)?;
    let plan = plan_rows(x.rows(), params);
    let base = plan.train.iter().map(|&r| y[r as usize]).sum::<f64>() / plan.train.len() as f64;
    let n = x.rows();
    let mut pred = vec![base; n];
    let mut residual = vec![0.0; n];
    let mse = |pred: &[f64], rows: &[u32]| {
        rows.iter().map(|&r| (y[r as usize] - pred[r as usize]).powi(2)).sum::<f64>() / rows.len() as f64
    };
    let mut history = vec![mse(&pred, &plan.train)];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut stop = params.early_stopping_rounds.map(|p| EarlyStop {
        patience: p,
        best: mse(&pred, &plan.valid),
        best_round: 0,
    });

    for round in 0..params.rounds {
        for i in 0..n {
            residual[i] = y[i] - pred[i];
        }
        let rows = round_rows(&plan.train, params, round);
        let tree = grow_tree(&binned, &residual, None, rows, params);
        pred.par_iter_mut().enumerate().for_each(|(r, p)| {
            *p += params.learning_rate * predict_binned(&tree, &binned, r);
        });
        trees.push(tree);
        history.push(mse(&pred, &plan.train));
        if let Some(s) = stop.as_mut() {
            if s.update(round, mse(&pred, &plan.valid)) {
                break;
            }
        }
    }
    if let Some(s) = stop {
        trees.truncate(s.best_round);
        history.truncate(s.best_round + 1);
    }
    let rounds = trees.len();
    Ok((
        TreeEnsemble {
            mode: Mode::Regression,
            base_score: vec![base],
            trees,
            learning_rate: params.learning_rate,
            rounds,
            max_depth: params.max_depth,
            feature_dim: x.cols(),
        },
        history,
    ))
}

pub fn fit_regressor(x: &FeatureMatrix, y: &[f64], params: &GbtParams) -> Result<TreeEnsemble> {
    fit_regressor_logged(x, y, params).map(|(m, _)| m)
}

fn log_loss(scores: &[f64], labels: &[usize], k: usize, rows: &[u32]) -> f64 {
    rows.iter()
        .map(|&r| {
            let s = &scores[r as usize * k..(r as usize + 1) * k];
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - s[labels[r as usize]]
        })
        .sum::<f64>()
        / rows.len() as f64
}

const MAX_STEP_HALVINGS: usize = 30;

/// Softmax boosting with one tree per class and round; returns per-round
/// training log-loss (index 0 is the prior-only loss).
///
/// If a round would raise the training loss, its leaf values are halved
/// until it does not (or zeroed), keeping the loss non-increasing.
pub fn fit_classifier_logged(
    x: &FeatureMatrix,
    labels: &[usize],
    num_classes: usize,
    params: &GbtParams,
) -> Result<(TreeEnsemble, Vec<f64>)> {
    check_inputs(x, labels.len(), params)?;
    ensure!(num_classes >= 2, "classification needs at least 2 classes");
    let k = num_classes;
    ensure!(
        labels.iter().all(|&l| l < k),
        "labels must lie in 0..{k}"
    );
    let plan = plan_rows(x.rows(), params);
    let mut counts = vec![0usize; k];
    plan.train.iter().for_each(|&r| counts[labels[r as usize]] += 1);
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "class {c} has no training samples; oversample it before training"
        )));
    }
    let binned = BinnedFeatures::build(x, params.candidates)?;
    let n = x.rows();
    let total = plan.train.len() as f64;
    let base: Vec<f64> = counts.iter().map(|&c| (c as f64 / total).ln()).collect();
    let mut scores: Vec<f64> = (0..n).flat_map(|_| base.iter().copied()).collect();
    let mut history = vec![log_loss(&scores, labels, k, &plan.train)];
    let mut trees: Vec<Tree> = Vec::with_capacity(params.rounds * k);
    let mut stop = params.early_stopping_rounds.map(|p| EarlyStop {
        patience: p,
        best: log_loss(&scores, labels, k, &plan.valid),
        best_round: 0,
    });

    let mut residual = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for round in 0..params.rounds {
        let probs: Vec<Vec<f64>> = (0..n).map(|r| softmax(&scores[r * k..(r + 1) * k])).collect();
        let rows = round_rows(&plan.train, params, round);
        let mut round_trees = Vec::with_capacity(k);
        for c in 0..k {
            for r in 0..n {
                let p = probs[r][c];
                residual[r] = if labels[r] == c { 1.0 - p } else { -p };
                hess[r] = p * (1.0 - p);
            }
            round_trees.push(grow_tree(&binned, &residual, Some(&hess), rows.clone(), params));
        }
        // Raw per-row tree outputs for this round.
        let deltas: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|r| {
                round_trees
                    .iter()
                    .map(|t| predict_binned(t, &binned, r))
                    .collect::<Vec<_>>()
            })
            .collect();
        let prev = *history.last().expect("history has the base loss");
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_STEP_HALVINGS {
            let trial: Vec<f64> = scores
                .iter()
                .zip(&deltas)
                .map(|(s, d)| s + params.learning_rate * scale * d)
                .collect();
            let loss = log_loss(&trial, labels, k, &plan.train);
            if loss <= prev {
                accepted = Some((trial, loss));
                break;
            }
            scale *= 0.5;
        }
        let (new_scores, loss) = accepted.unwrap_or_else(|| {
            scale = 0.0;
            (scores.clone(), prev)
        });
        if scale != 1.0 {
            for t in round_trees.iter_mut() {
                for node in t.nodes.iter_mut() {
                    if let TreeNode::Leaf { value } = node {
                        *value *= scale;
                    }
                }
            }
        }
        scores = new_scores;
        trees.extend(round_trees);
        history.push(loss);
        if let Some(s) = stop.as_mut() {
            if s.update(round, log_loss(&scores, labels, k, &plan.valid)) {
                break;
            }
        }
    }
    if let Some(s) = stop {
        trees.truncate(s.best_round * k);
        history.truncate(s.best_round + 1);
    }
    let rounds = trees.len() / k;
    Ok((
        TreeEnsemble {
            mode: Mode::Multiclass(k),
            base_score: base,
            trees,
            learning_rate: params.learning_rate,
            rounds,
            max_depth: params.max_depth,
            feature_dim: x.cols(),
        },
        history,
    ))
}

pub fn fit_classifier(
    x: &FeatureMatrix,
    labels: &[usize],
    num_classes: usize,
    params: &GbtParams,
) -> Result<TreeEnsemble> {
    fit_classifier_logged(x, labels, num_classes, params).map(|(m, _)| m)
}
