//! Oracles and checks shared by the integration tests and the acceptance
//! harness. Checks panic with a message on failure.
#![allow(dead_code)]

use echohop::gbt::{fit_classifier_logged, fit_regressor, fit_regressor_logged, Candidates, FeatureMatrix, GbtParams, Tree, TreeNode};
use echohop::encoder::{encode, EncoderModel, HopModel};
use echohop::config::RunConfig;
use echohop::io::container::ModelContainer;
use echohop::io::manifest::Split;
use echohop::io::phantom::{generate_phantoms, PhantomCase, PhantomSpec};
use echohop::metrics::{dice, iou, ConfusionMatrix};
use echohop::pipeline::{case_labels, descriptors_stage, fit_encoder_stage, train_cls_stage, train_seg_stage, Case};
use echohop::saab::{fit_saab_full, select_k, PatchSet, SaabFilterBank};
use rand::{Rng, SeedableRng};
use echohop::seg::grid::patch_average_downsample;
use echohop::volume::{Dims, Volume};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- GBT

pub fn random_data(seed: u64, rows: usize, cols: usize) -> (FeatureMatrix, Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    let x = FeatureMatrix::new(rows, cols, data).unwrap();
    let y: Vec<f64> = (0..rows)
        .map(|r| {
            let v = x.row(r);
            (v[0] as f64).sin() + 0.5 * (v[1 % cols] as f64).powi(2) + rng.gen_range(-0.3..0.3)
        })
        .collect();
    let labels: Vec<usize> = (0..rows)
        .map(|r| {
            let s = x.row(r)[0] + 0.3 * rng.gen_range(-1.0f32..1.0);
            if s < -0.6 {
                0
            } else if s < 0.6 {
                1
            } else {
                2
            }
        })
        .collect();
    (x, y, labels)
}

pub fn gbt_params(rounds: usize, depth: usize) -> GbtParams {
    GbtParams {
        rounds,
        max_depth: depth,
        min_samples_leaf: 1,
        learning_rate: 0.3,
        candidates: Candidates::Quantile(16),
        ..GbtParams::default()
    }
}

/// Per-round training MSE and log-loss never increase.
pub fn check_loss_monotone(seed: u64) {
    let (x, y, labels) = random_data(seed, 120, 5);
    let (_, mse) = fit_regressor_logged(&x, &y, &gbt_params(40, 3)).unwrap();
    assert_eq!(mse.len(), 41);
    for w in mse.windows(2) {
        assert!(w[1] <= w[0], "seed {seed}: mse rose {} -> {}", w[0], w[1]);
    }
    assert!(mse[40] < mse[0]);
    let (_, ll) = fit_classifier_logged(&x, &labels, 3, &gbt_params(40, 3)).unwrap();
    assert_eq!(ll.len(), 41);
    for w in ll.windows(2) {
        assert!(w[1] <= w[0], "seed {seed}: log-loss rose {} -> {}", w[0], w[1]);
    }
    assert!(ll[40] < ll[0]);
}

/// A step target at depth 1 and an interaction target at depth 2 are
/// reproduced exactly by a single round at learning rate 1.
pub fn check_exact_fits() {
    let x = FeatureMatrix::from_rows(&[[0.0f32], [1.0], [2.0], [3.0], [4.0], [5.0]]).unwrap();
    let y = [1.0, 1.0, 1.0, 4.0, 4.0, 4.0];
    let p = GbtParams {
        learning_rate: 1.0,
        ..gbt_params(1, 1)
    };
    let m = fit_regressor(&x, &y, &p).unwrap();
    assert_eq!(m.predict(&x).unwrap(), y.to_vec());
    match &m.trees[0].nodes[0] {
        TreeNode::Split { feature, threshold, .. } => assert_eq!((*feature, *threshold), (0, 2.5)),
        other => panic!("expected a split, got {other:?}"),
    }

    let rows = [[0.0f32, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
    let x = FeatureMatrix::from_rows(&rows).unwrap();
    let y = [0.0, 2.0, 3.0, 7.0];
    let p = GbtParams {
        learning_rate: 1.0,
        ..gbt_params(1, 2)
    };
    let m = fit_regressor(&x, &y, &p).unwrap();
    for (a, b) in m.predict(&x).unwrap().iter().zip(y) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

/// Midpoints between consecutive distinct values of each full column.
pub fn all_midpoints(x: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..x.cols())
        .map(|f| {
            let mut v: Vec<f64> = (0..x.rows()).map(|r| x.row(r)[f] as f64).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            v.dedup();
            v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        })
        .collect()
}

/// Greedy tree grown by brute force over every candidate, with the same
/// tie rules: strictly positive gain, lowest feature, then lowest threshold.
pub fn oracle_tree(
    x: &FeatureMatrix,
    cand: &[Vec<f64>],
    resid: &[f64],
    rows: &[usize],
    depth: usize,
    max_depth: usize,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let n = rows.len() as f64;
    let total: f64 = rows.iter().map(|&r| resid[r]).sum();
    let id = nodes.len();
    nodes.push(TreeNode::Leaf { value: total / n });
    if depth >= max_depth || rows.len() < 2 {
        return id;
    }
    let mut best: Option<(f64, usize, f64)> = None;
    for (f, thresholds) in cand.iter().enumerate() {
        for &t in thresholds {
            let (mut sl, mut nl) = (0.0, 0.0);
            for &r in rows {
                if (x.row(r)[f] as f64) <= t {
                    sl += resid[r];
                    nl += 1.0;
                }
            }
            if nl == 0.0 || nl == n {
                continue;
            }
            let sr = total - sl;
            let gain = sl * sl / nl + sr * sr / (n - nl) - total * total / n;
            if gain > best.map_or(1e-12, |b| b.0 + 1e-9) {
                best = Some((gain, f, t));
            }
        }
    }
    let Some((_, f, t)) = best else {
        return id;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| (x.row(r)[f] as f64) <= t);
    let left = oracle_tree(x, cand, resid, &l, depth + 1, max_depth, nodes);
    let right = oracle_tree(x, cand, resid, &r, depth + 1, max_depth, nodes);
    nodes[id] = TreeNode::Split {
        feature: f,
        threshold: t,
        left,
        right,
    };
    id
}

pub fn assert_same_tree(got: &Tree, want: &[TreeNode]) {
    assert_eq!(got.nodes.len(), want.len(), "{got:?}\nvs\n{want:?}");
    for (a, b) in got.nodes.iter().zip(want) {
        match (a, b) {
            (
                TreeNode::Split {
                    feature: fa,
                    threshold: ta,
                    left: la,
                    right: ra,
                },
                TreeNode::Split {
                    feature: fb,
                    threshold: tb,
                    left: lb,
                    right: rb,
                },
            ) => assert_eq!((fa, ta, la, ra), (fb, tb, lb, rb)),
            (TreeNode::Leaf { value: va }, TreeNode::Leaf { value: vb }) => {
                assert!((va - vb).abs() <= 1e-9 * (1.0 + vb.abs()), "{va} vs {vb}")
            }
            _ => panic!("node kinds differ: {a:?} vs {b:?}"),
        }
    }
}

/// The first tree grown with every midpoint as a candidate equals the
/// brute-force tree, node for node.
pub fn check_split_oracle(seed: u64) {
    let (x, y, _) = random_data(seed, 48, 4);
    let p = GbtParams {
        learning_rate: 1.0,
        candidates: Candidates::AllMidpoints,
        ..gbt_params(1, 3)
    };
    let m = fit_regressor(&x, &y, &p).unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert_eq!(m.base_score, vec![mean]);
    let resid: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let rows: Vec<usize> = (0..y.len()).collect();
    let mut want = Vec::new();
    oracle_tree(&x, &all_midpoints(&x), &resid, &rows, 0, 3, &mut want);
    assert_same_tree(&m.trees[0], &want);
}

// ---------------------------------------------------------------- Saab

/// Cyclic Jacobi eigendecomposition of a symmetric `d x d` matrix.
/// Returns eigenvalues (descending) and unit eigenvectors as rows.
pub fn jacobi_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j].powi(2))
            .sum();
        let scale: f64 = (0..d).map(|i| m[i * d + i].powi(2)).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j * d + j].total_cmp(&m[i * d + i]));
    let values = order.iter().map(|&i| m[i * d + i]).collect();
    let vectors = order.iter().map(|&i| (0..d).map(|k| v[k * d + i]).collect()).collect();
    (values, vectors)
}

/// Correlated patches: independent sources at geometric scales mixed by a
/// random matrix, plus a per-patch offset that lands in the DC direction.
pub fn correlated_patches(n: usize, d: usize, seed: u64) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let src: Vec<f64> = (0..d).map(|j| rng.gen_range(-1.0..1.0) * 0.8f64.powi(j as i32)).collect();
        let offset = rng.gen_range(-2.0..3.0);
        for i in 0..d {
            data.push(offset + 0.5 + (0..d).map(|j| mix[i * d + j] * src[j]).sum::<f64>());
        }
    }
    PatchSet::new(d, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Covariance of DC-removed patches, normalized by `n`.
pub fn ac_covariance(p: &PatchSet) -> Vec<f64> {
    let (n, d) = (p.len(), p.dim());
    let rows: Vec<Vec<f64>> = p
        .rows()
        .map(|x| {
            let m = x.iter().sum::<f64>() / d as f64;
            x.iter().map(|v| v - m).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for r in &rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    cov
}

/// Orthonormality, DC handling, decorrelation and eigen-oracle agreement
/// of a full Saab bank on one dataset. Returns the bank.
pub fn check_saab_dataset(n: usize, d: usize, seed: u64) -> SaabFilterBank {
    let patches = correlated_patches(n, d, seed);
    let bank = fit_saab_full(&patches).unwrap();
    assert_eq!(bank.num_ac(), d - 1, "full-rank data keeps every AC");

    // Orthonormality of [a0; a1; ...; aK].
    let mut rows: Vec<&[f64]> = vec![bank.dc_anchor()];
    rows.extend((0..bank.num_ac()).map(|j| bank.ac_filter(j)));
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            let g = dot(a, b);
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((g - want).abs() <= 1e-8, "gram[{i}][{j}] = {g}");
        }
    }

    // DC anchor is the normalized constant; constant patches have no AC.
    for &a in bank.dc_anchor() {
        assert!((a - 1.0 / (d as f64).sqrt()).abs() <= 1e-15);
    }
    for v in [-1.5, 0.0, 2.25] {
        let y = bank.apply(&vec![v; d]).unwrap();
        assert!((y[0] - (v * (d as f64).sqrt() + bank.bias())).abs() <= 1e-9);
        assert!(y[1..].iter().all(|r| r.abs() <= 1e-9), "{y:?}");
    }

    // AC responses are decorrelated over the training patches.
    let k = bank.num_ac();
    let resp: Vec<Vec<f64>> = patches.rows().map(|x| bank.apply(x).unwrap()[1..].to_vec()).collect();
    let mean: Vec<f64> = (0..k).map(|j| resp.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; k * k];
    for r in &resp {
        for i in 0..k {
            for j in 0..k {
                cov[i * k + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    let max_diag = (0..k).map(|i| cov[i * k + i]).fold(0.0, f64::max);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                assert!(cov[i * k + j].abs() <= 1e-6 * max_diag, "cov[{i}][{j}] = {}", cov[i * k + j]);
            }
        }
    }

    // Filters and eigenvalues agree with a dense Jacobi eigendecomposition.
    let (values, vectors) = jacobi_eigen(&ac_covariance(&patches), d);
    let top = values[0];
    for j in 0..d - 1 {
        let got = bank.spectrum()[j];
        assert!((got - values[j]).abs() <= 1e-6 * top, "eigenvalue {j}: {got} vs {}", values[j]);
        let align = dot(bank.ac_filter(j), &vectors[j]).abs();
        assert!((align - 1.0).abs() <= 1e-6, "filter {j} alignment {align}");
    }
    // The remaining eigenvector is the DC direction with eigenvalue 0.
    assert!(values[d - 1].abs() <= 1e-9 * top);
    assert!((dot(&vectors[d - 1], bank.dc_anchor()).abs() - 1.0).abs() <= 1e-6);
    bank
}

/// Datasets `(patches, dimension)` used by the Saab suite.
pub const SAAB_DATASETS: [(usize, usize); 3] = [(1500, 9), (2000, 27), (2500, 18)];

/// Smallest `K` whose cumulative ratio reaches `t`, by direct scan.
pub fn linear_scan_k(spectrum: &[f64], t: f64) -> usize {
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, l) in spectrum.iter().enumerate() {
        acc += l;
        if acc / total >= t {
            return i + 1;
        }
    }
    spectrum.len()
}

/// `select_k` equals the linear scan on `count` random sorted spectra.
pub fn check_select_k_random(count: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let len = rng.gen_range(1..400);
        let decay = rng.gen_range(0.5..1.0);
        let mut s: Vec<f64> = (0..len)
            .map(|j| rng.gen_range(0.0..1.0) * f64::powi(decay, j as i32) + if rng.gen_bool(0.1) { 0.0 } else { 1e-6 })
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        for t in [0.5, 0.9, 0.95, 0.97, 0.99, 1.0] {
            assert_eq!(select_k(&s, t).unwrap(), linear_scan_k(&s, t), "spectrum {i}, threshold {t}");
        }
    }
}

/// Reference energy table, one row per hop: minimal `K` at 95..99% and
/// the number of potential AC filters.
pub const HOPLEVEL_K: [([usize; 5], usize); 4] = [
    ([10, 11, 13, 15, 19], 26),
    ([79, 92, 107, 127, 152], 702),
    ([232, 255, 280, 308, 341], 5252),
    ([470, 500, 533, 568, 605], 11102),
];

/// Percentages quoted next to each `K` in the same table.
pub const HOPLEVEL_PERCENT: [[f64; 5]; 4] = [
    [38.46, 42.31, 50.00, 57.69, 73.08],
    [11.25, 13.11, 15.24, 18.09, 21.65],
    [4.42, 4.86, 5.33, 5.86, 6.49],
    [4.23, 4.50, 4.80, 5.12, 5.45],
];

pub const THRESHOLDS: [f64; 5] = [0.95, 0.96, 0.97, 0.98, 0.99];

/// Non-increasing spectrum whose cumulative ratio first reaches each
/// threshold exactly at the given `K`: segments of equal eigenvalues whose
/// mass ends just above the threshold.
pub fn spectrum_for(ks: [usize; 5], total: usize) -> Vec<f64> {
    let eps = 1e-7;
    let mut s = Vec::with_capacity(total);
    let (mut prev_k, mut prev_c) = (0usize, 0.0);
    for (&k, &t) in ks.iter().zip(&THRESHOLDS) {
        let c = t + eps;
        let v = (c - prev_c) / (k - prev_k) as f64;
        s.extend(std::iter::repeat(v).take(k - prev_k));
        prev_k = k;
        prev_c = c;
    }
    let tail = (1.0 - prev_c) / (total - prev_k) as f64;
    s.extend(std::iter::repeat(tail).take(total - prev_k));
    s
}

/// `select_k` reproduces every `K` of the table from spectra built to
/// match its cumulative percentages; the quoted percentages are `K/Total`.
pub fn check_hoplevel_fixture() {
    for (hop, ((ks, total), pct)) in HOPLEVEL_K.iter().zip(&HOPLEVEL_PERCENT).enumerate() {
        let s = spectrum_for(*ks, *total);
        assert_eq!(s.len(), *total);
        assert!(s.windows(2).all(|w| w[1] <= w[0]), "hop {} spectrum not sorted", hop + 1);
        for ((&k, &t), &p) in ks.iter().zip(&THRESHOLDS).zip(pct) {
            assert_eq!(select_k(&s, t).unwrap(), k, "hop {} at {t}", hop + 1);
            let quoted = (10_000.0 * k as f64 / *total as f64).round() / 100.0;
            assert!((quoted - p).abs() < 1e-9, "hop {}: {k}/{total} is {quoted}%, table says {p}%", hop + 1);
        }
    }
}

// ---------------------------------------------------------------- metrics

pub fn random_mask_pair(rng: &mut ChaCha8Rng, len: usize) -> (Vec<bool>, Vec<bool>) {
    let pa = rng.gen_range(0.05..0.95);
    let pb = rng.gen_range(0.05..0.95);
    let a: Vec<bool> = (0..len).map(|_| rng.gen_bool(pa)).collect();
    let b: Vec<bool> = a.iter().map(|&x| if rng.gen_bool(0.3) { rng.gen_bool(pb) } else { x }).collect();
    (a, b)
}

/// IoU = DSC / (2 - DSC) on `count` random mask pairs.
pub fn check_iou_dice_identity(count: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let len = rng.gen_range(1..2000);
        let (a, b) = random_mask_pair(&mut rng, len);
        if !a.iter().chain(&b).any(|&x| x) {
            continue;
        }
        let d = dice(&a, &b).unwrap();
        let j = iou(&a, &b).unwrap();
        assert!((j - d / (2.0 - d)).abs() <= 1e-12, "pair {i}: iou {j}, dsc {d}");
    }
}

/// Accuracy and balanced accuracy hand cases, and the confusion-matrix
/// row-sum contract.
pub fn check_classification_hand_cases() {
    let m = ConfusionMatrix {
        classes: 2,
        counts: vec![vec![1, 1], vec![0, 2]],
    };
    assert_eq!(m.accuracy().unwrap(), 0.75);
    assert_eq!(m.recalls(), vec![Some(0.5), Some(1.0)]);
    assert_eq!(m.balanced_accuracy().unwrap(), 0.75);

    // 10 samples of class 0, 2 of class 1, 3 of class 2.
    let truth = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 2, 2, 2];
    let pred = [0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 2, 2, 0];
    let cm = ConfusionMatrix::from_labels(&truth, &pred, 3).unwrap();
    assert_eq!(cm.counts, vec![vec![9, 1, 0], vec![1, 1, 0], vec![1, 0, 2]]);
    assert!((cm.accuracy().unwrap() - 12.0 / 15.0).abs() <= 1e-15);
    let ba = (9.0 / 10.0 + 1.0 / 2.0 + 2.0 / 3.0) / 3.0;
    assert!((cm.balanced_accuracy().unwrap() - ba).abs() <= 1e-15);
    assert_eq!(cm.row_sums(), vec![10, 2, 3]);
    assert_eq!(cm.total(), 15);

    // Always predicting the majority class: accuracy is its share, BA is 1/3.
    let all0 = [0usize; 15];
    let cm = ConfusionMatrix::from_labels(&truth, &all0, 3).unwrap();
    assert!((cm.accuracy().unwrap() - 10.0 / 15.0).abs() <= 1e-15);
    assert!((cm.balanced_accuracy().unwrap() - 1.0 / 3.0).abs() <= 1e-15);

    // Perfect prediction.
    let cm = ConfusionMatrix::from_labels(&truth, &truth, 3).unwrap();
    assert_eq!(cm.accuracy().unwrap(), 1.0);
    assert_eq!(cm.balanced_accuracy().unwrap(), 1.0);

    // Row sums equal per-class support on random labels.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rng.gen_range(1..300);
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let cm = ConfusionMatrix::from_labels(&t, &p, 3).unwrap();
        let support: Vec<usize> = (0..3).map(|c| t.iter().filter(|&&x| x == c).count()).collect();
        assert_eq!(cm.row_sums(), support);
        assert_eq!(cm.total(), n);
    }
}

// ---------------------------------------------------------------- encoder

pub fn random_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Smooth structure plus noise so every hop keeps some AC filters.
    Volume::from_fn(dims, |h, w, t, c| {
        let base = ((h as f32) * 0.4 + (c as f32)).sin() * ((w as f32) * 0.3 + (t as f32) * 0.5).cos();
        base + rng.gen_range(-0.3f32..0.3)
    })
}

/// One hop applied voxel by voxel: edge-replicated neighborhoods in
/// `(dh, dw, dt)` order, DC response plus bias, then AC responses.
pub fn naive_hop(hop: &HopModel, input: &Volume) -> Vec<Vec<f64>> {
    let d = input.dims();
    let (s, k) = (hop.config.spatial_window as isize, hop.config.temporal_window as isize);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(d.voxels());
    for h in 0..d.h {
        for w in 0..d.w {
            for t in 0..d.t {
                let mut v = Vec::new();
                for (c, bank) in hop.banks.iter().enumerate() {
                    let mut patch = Vec::with_capacity(bank.dim());
                    for dh in -(s / 2)..=s / 2 {
                        for dw in -(s / 2)..=s / 2 {
                            for dt in -(k / 2)..=k / 2 {
                                patch.push(input.get(
                                    clamp(h as isize + dh, d.h),
                                    clamp(w as isize + dw, d.w),
                                    clamp(t as isize + dt, d.t),
                                    c,
                                ) as f64);
                            }
                        }
                    }
                    let dot = |f: &[f64]| f.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
                    v.push(dot(bank.dc_anchor()) + bank.bias());
                    for j in 0..bank.num_ac() {
                        v.push(dot(bank.ac_filter(j)));
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

/// 2x2 spatial max over an edge-padded volume.
pub fn naive_pool(v: &Volume) -> Volume {
    let d = v.dims();
    let out = Dims::new(d.h.div_ceil(2), d.w.div_ceil(2), d.t, d.c);
    Volume::from_fn(out, |h, w, t, c| {
        let mut m = f32::NEG_INFINITY;
        for y in [2 * h, (2 * h + 1).min(d.h - 1)] {
            for x in [2 * w, (2 * w + 1).min(d.w - 1)] {
                m = m.max(v.get(y, x, t, c));
            }
        }
        m
    })
}

/// `encode` agrees with the voxel-by-voxel reference at every level within
/// `tol` relative to the largest response of that level.
pub fn check_encoder_oracle(model: &EncoderModel, vol: &Volume, tol: f64) {
    let maps = encode(model, vol).unwrap();
    let mut input = vol.clone();
    for (l, hop) in model.hops().iter().enumerate() {
        let want = naive_hop(hop, &input);
        let got = maps.level(l + 1);
        let c = got.dims().c;
        assert_eq!(c, want[0].len(), "hop {} channel count", l + 1);
        let scale = want.iter().flatten().fold(0f64, |m, v| m.max(v.abs())).max(1.0);
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                let g = got.data()[i * c + j] as f64;
                assert!((g - w).abs() <= tol * scale, "hop {} voxel {i} channel {j}: {g} vs {w}", l + 1);
            }
        }
        input = naive_pool(got);
    }
}

/// Hop resolutions for a `size x size` input halve three times, and the
/// encoded maps carry the per-hop channel counts.
pub fn check_resolution_chain(model: &EncoderModel, vol: &Volume) {
    let d = vol.dims();
    let want: Vec<(usize, usize, usize)> = (0..4).map(|l| (d.h >> l, d.w >> l, d.t)).collect();
    assert_eq!(model.per_hop_resolutions(), want);
    let maps = encode(model, vol).unwrap();
    for (l, f) in maps.levels.iter().enumerate() {
        let fd = f.dims();
        assert_eq!((fd.h, fd.w, fd.t), want[l], "level {}", l + 1);
        assert_eq!(fd.c, model.per_hop_channel_counts()[l], "level {} channels", l + 1);
    }
}

/// Block averaging at factors 2, 4 and 8 keeps the foreground count exact.
pub fn check_label_conservation(mask: &[bool], h: usize, w: usize) {
    let count = mask.iter().filter(|&&m| m).count();
    for (level, factor) in [(2, 2), (3, 4), (4, 8)] {
        let g = patch_average_downsample(mask, h, w, factor, level).unwrap();
        assert_eq!((g.h, g.w), (h / factor, w / factor));
        let area = (factor * factor) as f64;
        let cells: Vec<u64> = g
            .values
            .iter()
            .map(|&v| {
                let n = v * area;
                assert_eq!(n, n.round(), "fraction {v} is not a count over {area}");
                assert!((0.0..=1.0).contains(&v));
                n as u64
            })
            .collect();
        assert_eq!(cells.iter().sum::<u64>(), count as u64, "level {level}");
        for (i, &n) in cells.iter().enumerate() {
            let (by, bx) = (i / g.w, i % g.w);
            let direct = (0..factor)
                .flat_map(|y| (0..factor).map(move |x| (y, x)))
                .filter(|&(y, x)| mask[(by * factor + y) * w + bx * factor + x])
                .count();
            assert_eq!(n, direct as u64);
        }
    }
}

// ---------------------------------------------------------------- pipeline

/// A run configuration for 32x32, 4-frame phantoms with short ensembles.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.preprocess.size = 32;
    cfg.preprocess.frames = 4;
    cfg.mask_frames = [0, 2];
    cfg.synth = PhantomSpec {
        size: 32,
        frames: 4,
        center_jitter: 2.0,
        axis_a: (9.0, 10.0),
        axis_b: (6.0, 7.0),
        edge_width: 3.0,
        speckle_blur: 2,
        ..PhantomSpec::default()
    };
    cfg.encoder.max_fit_patches = 4000;
    cfg.seg.crop_margin = 4;
    cfg.seg.initial.rounds = 10;
    cfg.seg.residual.rounds = 10;
    cfg.cls.gbt.rounds = 10;
    cfg.validate().unwrap();
    cfg.resolved()
}

pub fn to_case(p: PhantomCase) -> Case {
    Case {
        name: p.name,
        class: Some(p.class),
        volume: p.volume,
        masks: Some(p.masks),
    }
}

pub fn phantom_cases(cfg: &RunConfig, splits: &[(Split, usize)]) -> Vec<Case> {
    generate_phantoms(&cfg.synth, splits)
        .unwrap()
        .into_iter()
        .map(to_case)
        .collect()
}

/// Encoder, segmentation and classification trained on `cases`.
pub fn train_model(cfg: &RunConfig, cases: &[Case]) -> ModelContainer {
    let encoder = fit_encoder_stage(cases, cfg).unwrap();
    let (seg, _) = train_seg_stage(&encoder, cases, cfg).unwrap();
    let descs = descriptors_stage(&encoder, cases, &cfg.preprocess).unwrap();
    let cls = train_cls_stage(&encoder, &descs, &case_labels(cases).unwrap(), &cfg.cls).unwrap();
    let mut model = ModelContainer::new(cfg.preprocess.clone(), encoder);
    model.config_echo = Some(cfg.to_toml().unwrap());
    model.seg = Some(seg);
    model.cls = Some(cls);
    model
}
