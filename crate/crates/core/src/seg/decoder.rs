use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{mean_sq_diff, patch_average_downsample, upsample, LevelGrid};
use super::roi::{partition_roi, sample_roi, RoiLabel, RoiPartition};
use crate::encoder::FeatureMaps;
use crate::error::{ensure, Error, Result};
use crate::gbt::{self, Candidates, FeatureMatrix, GbtParams, TreeEnsemble};
use crate::metrics::dice;
use crate::volume::{Dims, Volume};

pub const LEVELS: usize = 4;
/// Full-resolution pixels per level-4 cell along each axis.
const COARSEST: usize = 1 << (LEVELS - 1);
/// Smallest step tried before a residual correction is dropped.
const MIN_STEP: f64 = 1.0 / 1024.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    /// Chebyshev dilation of the boundary seeds, in cells of each level.
    pub dilation_radius: usize,
    /// Margin added around the union of training masks, full-res pixels.
    pub crop_margin: usize,
    /// Interior and background cells drawn per boundary cell.
    pub roi_ratio: f64,
    pub threshold: f64,
    pub initial: GbtParams,
    pub residual: GbtParams,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            dilation_radius: 1,
            crop_margin: 8,
            roi_ratio: 1.0,
            threshold: 0.5,
            initial: GbtParams {
                rounds: 100,
                max_depth: 5,
                candidates: Candidates::Quantile(64),
                ..GbtParams::default()
            },
            residual: GbtParams {
                rounds: 100,
                max_depth: 6,
                candidates: Candidates::Quantile(64),
                ..GbtParams::default()
            },
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            "segmentation threshold must lie in (0, 1)"
        );
        ensure!(self.roi_ratio >= 0.0, "roi_ratio must be non-negative");
        self.initial.validate()?;
        self.residual.validate()
    }
}

/// Full-resolution crop rectangle `[h0, h1) x [w0, w1)`, aligned so that it
/// maps exactly onto every level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub h0: usize,
    pub h1: usize,
    pub w0: usize,
    pub w1: usize,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> Self {
        CropBox { h0: 0, h1: h, w0: 0, w1: w }
    }

    /// Bounding box of the union of `masks` (each `h x w`), grown by
    /// `margin` pixels, snapped outwards to the level-4 grid and clipped to
    /// the frame.
    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a [bool]>, h: usize, w: usize, margin: usize) -> Result<Self> {
        ensure!(
            h % COARSEST == 0 && w % COARSEST == 0,
            "frame {h}x{w} must be divisible by {COARSEST}"
        );
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for m in masks {
            ensure!(m.len() == h * w, "mask has {} cells, expected {h}x{w}", m.len());
            for (i, _) in m.iter().enumerate().filter(|(_, &v)| v) {
                let (y, x) = (i / w, i % w);
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
        if y0 == usize::MAX {
            return Err(Error::Training("training masks contain no foreground".into()));
        }
        let down = |v: usize| (v.saturating_sub(margin) / COARSEST) * COARSEST;
        let up = |v: usize, n: usize| ((v + margin).div_ceil(COARSEST) * COARSEST).min(n);
        Ok(CropBox {
            h0: down(y0),
            h1: up(y1, h),
            w0: down(x0),
            w1: up(x1, w),
        })
    }

    /// `(h0, h1, w0, w1)` in cells of `level`.
    pub fn at_level(&self, level: usize) -> (usize, usize, usize, usize) {
        let f = 1 << (level - 1);
        (self.h0 / f, self.h1 / f, self.w0 / f, self.w1 / f)
    }

    pub fn dims_at(&self, level: usize) -> (usize, usize) {
        let (h0, h1, w0, w1) = self.at_level(level);
        (h1 - h0, w1 - w0)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        ensure!(
            self.h0 < self.h1 && self.w0 < self.w1 && self.h1 <= h && self.w1 <= w,
            "crop box {:?} does not fit a {h}x{w} frame",
            self
        );
        ensure!(
            [self.h0, self.h1, self.w0, self.w1].iter().all(|v| v % COARSEST == 0),
            "crop box {:?} is not aligned to {COARSEST}",
            self
        );
        Ok(())
    }
}

/// Cuts the crop out of a full-resolution `h x w` mask.
pub fn crop_mask(mask: &[bool], w: usize, crop: &CropBox) -> Vec<bool> {
    let mut out = Vec::with_capacity((crop.h1 - crop.h0) * (crop.w1 - crop.w0));
    for y in crop.h0..crop.h1 {
        out.extend_from_slice(&mask[y * w + crop.w0..y * w + crop.w1]);
    }
    out
}

/// Feature rows of one time index inside the crop, one matrix per level
/// (index 0 is level 1). Rows run over the cropped grid in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFeatures {
    pub levels: Vec<FeatureMatrix>,
}

pub fn slice_features(maps: &FeatureMaps, t: usize, crop: &CropBox) -> Result<SliceFeatures> {
    ensure!(maps.levels.len() == LEVELS, "expected {LEVELS} feature levels");
    let d1 = maps.levels[0].dims();
    crop.validate(d1.h, d1.w)?;
    let mut levels = Vec::with_capacity(LEVELS);
    for (l, vol) in maps.levels.iter().enumerate() {
        let level = l + 1;
        let d = vol.dims();
        ensure!(
            d.h * (1 << l) == d1.h && d.w * (1 << l) == d1.w,
            "level {level} features are {}x{}, expected {}x{}",
            d.h,
            d.w,
            d1.h >> l,
            d1.w >> l
        );
        ensure!(t < d.t, "time index {t} out of range for {} frames", d.t);
        let (h0, h1, w0, w1) = crop.at_level(level);
        let mut data = Vec::with_capacity((h1 - h0) * (w1 - w0) * d.c);
        for y in h0..h1 {
            for x in w0..w1 {
                data.extend_from_slice(vol.voxel(y, x, t));
            }
        }
        levels.push(FeatureMatrix::new((h1 - h0) * (w1 - w0), d.c, data)?);
    }
    Ok(SliceFeatures { levels })
}

/// One labelled time slice: its features and the cropped full-resolution
/// ground-truth mask.
#[derive(Debug, Clone)]
pub struct SegTrainSlice {
    pub features: SliceFeatures,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub frame: (usize, usize),
    pub crop: CropBox,
    pub feature_dims: [usize; LEVELS],
    pub threshold: f64,
    pub dilation_radius: usize,
    pub roi_ratio: f64,
    pub initial: TreeEnsemble,
    /// Residual regressors for levels 4, 3, 2, 1 in that order.
    pub residual: Vec<TreeEnsemble>,
}

impl SegModel {
    pub fn residual_for(&self, level: usize) -> &TreeEnsemble {
        &self.residual[LEVELS - level]
    }

    pub fn parameter_count(&self) -> usize {
        self.initial.parameter_count() + self.residual.iter().map(TreeEnsemble::parameter_count).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InitialAudit {
    pub mse: f64,
    pub target_variance: f64,
    pub dsc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelAudit {
    pub level: usize,
    pub boundary_cells: usize,
    pub samples: usize,
    /// Scale applied to the fitted correction.
    pub step: f64,
    pub mse_before: f64,
    pub mse_after: f64,
    pub boundary_mse_before: f64,
    pub boundary_mse_after: f64,
    pub dsc_before: f64,
    pub dsc_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegAudit {
    pub initial: InitialAudit,
    /// Levels 4, 3, 2, 1.
    pub levels: Vec<LevelAudit>,
}

impl SegAudit {
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec![
            "initial".to_string(),
            "4".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format!("{}", self.initial.mse),
            String::new(),
            String::new(),
            String::new(),
            format!("{}", self.initial.dsc),
        ]];
        for a in &self.levels {
            rows.push(vec![
                "residual".to_string(),
                a.level.to_string(),
                a.boundary_cells.to_string(),
                a.samples.to_string(),
                format!("{}", a.step),
                format!("{}", a.mse_before),
                format!("{}", a.mse_after),
                format!("{}", a.boundary_mse_before),
                format!("{}", a.boundary_mse_after),
                format!("{}", a.dsc_before),
                format!("{}", a.dsc_after),
            ]);
        }
        rows
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "stage",
        "level",
        "boundary_cells",
        "samples",
        "step",
        "mse_before",
        "mse_after",
        "boundary_mse_before",
        "boundary_mse_after",
        "dsc_before",
        "dsc_after",
    ];
}

fn vstack(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let cols = parts.first().map_or(0, FeatureMatrix::cols);
    let rows = parts.iter().map(FeatureMatrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        ensure!(p.cols() == cols, "feature width mismatch: {} vs {cols}", p.cols());
        data.extend_from_slice(p.data());
    }
    FeatureMatrix::new(rows, cols, data)
}

fn mean_dice(preds: &[LevelGrid], gts: &[LevelGrid], threshold: f64) -> f64 {
    let s: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| dice(&p.binarize(threshold), &g.binarize(0.5)).expect("same size"))
        .sum();
    s / preds.len().max(1) as f64
}

fn pooled_mse(preds: &[LevelGrid], gts: &[LevelGrid], cells: Option<&[RoiPartition]>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        for j in 0..p.values.len() {
            if cells.map_or(true, |r| r[i].labels[j] == RoiLabel::Boundary) {
                sum += (p.values[j] - g.values[j]).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Level-4 occupancy regressor over every cropped cell.
pub fn train_initial(features: &FeatureMatrix, targets: &[f64], params: &GbtParams) -> Result<TreeEnsemble> {
    ensure!(
        features.rows() == targets.len(),
        "{} feature rows for {} targets",
        features.rows(),
        targets.len()
    );
    if targets.iter().all(|&t| t <= 0.0) {
        return Err(Error::Training(
            "level-4 targets have no foreground; check masks and crop".into(),
        ));
    }
    gbt::fit_regressor(features, targets, params)
}

/// Residual regressor on ROI-sampled cells; the target is `gt - current`.
/// With no boundary cells the correction is the identity.
pub fn train_residual(
    features: &FeatureMatrix,
    current: &[f64],
    gt: &[f64],
    rows: &[usize],
    params: &GbtParams,
) -> Result<TreeEnsemble> {
    ensure!(
        features.rows() == current.len() && current.len() == gt.len(),
        "features, predictions and targets must align"
    );
    if rows.is_empty() {
        return Ok(TreeEnsemble::constant(0.0, features.cols()));
    }
    let x = features.select_rows(rows);
    let y: Vec<f64> = rows.iter().map(|&r| gt[r] - current[r]).collect();
    gbt::fit_regressor(&x, &y, params)
}

fn level_targets(slices: &[SegTrainSlice], crop: &CropBox, level: usize) -> Result<Vec<LevelGrid>> {
    let (h, w) = crop.dims_at(1);
    slices
        .par_iter()
        .map(|s| patch_average_downsample(&s.mask, h, w, 1 << (level - 1), level))
        .collect()
}

fn split_predictions(flat: &[f64], level: usize, h: usize, w: usize) -> Vec<LevelGrid> {
    flat.chunks(h * w)
        .map(|c| LevelGrid::new(level, h, w, c.to_vec()).expect("chunk matches grid"))
        .collect()
}

fn slice_seed(seed: u64, level: usize, slice: usize) -> u64 {
    seed ^ ((level as u64) << 56) ^ (slice as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains the full decoder chain on labelled slices. `frame` is the
/// full-resolution frame size the crop refers to.
///
/// Each fitted correction is halved until it raises neither the training
/// MSE nor the training DSC at its level; if no step down to `MIN_STEP`
/// qualifies, the level keeps the identity correction.
pub fn train_seg(
    slices: &[SegTrainSlice],
    crop: CropBox,
    frame: (usize, usize),
    cfg: &SegConfig,
) -> Result<(SegModel, SegAudit)> {
    cfg.validate()?;
    ensure!(!slices.is_empty(), "segmentation training set is empty");
    crop.validate(frame.0, frame.1)?;
    let mut feature_dims = [0usize; LEVELS];
    for (l, fd) in feature_dims.iter_mut().enumerate() {
        *fd = slices[0].features.levels[l].cols();
        let (h, w) = crop.dims_at(l + 1);
        for s in slices {
            ensure!(s.features.levels.len() == LEVELS, "slice has {} levels", s.features.levels.len());
            ensure!(
                s.features.levels[l].cols() == *fd && s.features.levels[l].rows() == h * w,
                "slice features at level {} do not match the crop",
                l + 1
            );
            ensure!(s.mask.len() == crop.dims_at(1).0 * crop.dims_at(1).1, "mask does not match the crop");
        }
    }

    // Level 4: initial regressor on every cropped cell.
    let (h4, w4) = crop.dims_at(LEVELS);
    let gt4 = level_targets(slices, &crop, LEVELS)?;
    let x4 = vstack(&slices.iter().map(|s| s.features.levels[LEVELS - 1].clone()).collect::<Vec<_>>())?;
    let y4: Vec<f64> = gt4.iter().flat_map(|g| g.values.iter().copied()).collect();
    let initial = train_initial(&x4, &y4, &cfg.initial)?;
    let p4 = initial.predict(&x4)?;
    drop(x4);
    let mean_y = y4.iter().sum::<f64>() / y4.len() as f64;
    let initial_audit = InitialAudit {
        mse: mean_sq_diff(&p4, &y4),
        target_variance: y4.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / y4.len() as f64,
        dsc: mean_dice(&split_predictions(&p4, LEVELS, h4, w4), &gt4, cfg.threshold),
    };
    log::info!(
        "level 4 initial: mse {:.5} (target variance {:.5}), dsc {:.4}",
        initial_audit.mse,
        initial_audit.target_variance,
        initial_audit.dsc
    );

    let mut preds = split_predictions(&p4, LEVELS, h4, w4);
    let mut residual = Vec::with_capacity(LEVELS);
    let mut audits = Vec::with_capacity(LEVELS);
    for level in (1..=LEVELS).rev() {
        let li = level - 1;
        if level < LEVELS {
            preds = preds.iter().map(upsample).collect::<Result<_>>()?;
        }
        let gts = if level == LEVELS {
            gt4.clone()
        } else {
            level_targets(slices, &crop, level)?
        };
        let rois: Vec<RoiPartition> = gts.par_iter().map(|g| partition_roi(g, cfg.dilation_radius)).collect();
        let picks: Vec<Vec<usize>> = rois
            .iter()
            .enumerate()
            .map(|(i, r)| sample_roi(r, cfg.roi_ratio, slice_seed(cfg.seed, level, i)))
            .collect();
        let boundary_cells: usize = rois.iter().map(|r| r.count(RoiLabel::Boundary)).sum();
        let samples: usize = picks.iter().map(Vec::len).sum();

        let model = if boundary_cells == 0 {
            TreeEnsemble::constant(0.0, feature_dims[li])
        } else {
            let x = vstack(
                &slices
                    .iter()
                    .zip(&picks)
                    .map(|(s, p)| s.features.levels[li].select_rows(p))
                    .collect::<Vec<_>>(),
            )?;
            let y: Vec<f64> = preds
                .iter()
                .zip(&gts)
                .zip(&picks)
                .flat_map(|((p, g), rows)| rows.iter().map(move |&r| g.values[r] - p.values[r]))
                .collect();
            gbt::fit_regressor(&x, &y, &cfg.residual)?
        };
        let deltas: Vec<Vec<f64>> = slices
            .iter()
            .map(|s| model.predict(&s.features.levels[li]))
            .collect::<Result<_>>()?;
        let apply = |step: f64| -> Result<Vec<LevelGrid>> {
            preds
                .iter()
                .zip(&deltas)
                .map(|(p, d)| {
                    let values = p.values.iter().zip(d).map(|(a, b)| a + step * b).collect();
                    LevelGrid::new(level, p.h, p.w, values)
                })
                .collect()
        };
        let mse_before = pooled_mse(&preds, &gts, None);
        let dsc_before = mean_dice(&preds, &gts, cfg.threshold);
        let mut step = 1.0;
        let mut corrected = apply(step)?;
        while pooled_mse(&corrected, &gts, None) > mse_before || mean_dice(&corrected, &gts, cfg.threshold) < dsc_before {
            step *= 0.5;
            if step < MIN_STEP {
                step = 0.0;
                corrected = preds.clone();
                break;
            }
            corrected = apply(step)?;
        }
        let model = model.scaled(step);
        let audit = LevelAudit {
            level,
            boundary_cells,
            samples,
            step,
            mse_before,
            mse_after: pooled_mse(&corrected, &gts, None),
            boundary_mse_before: pooled_mse(&preds, &gts, Some(&rois)),
            boundary_mse_after: pooled_mse(&corrected, &gts, Some(&rois)),
            dsc_before,
            dsc_after: mean_dice(&corrected, &gts, cfg.threshold),
        };
        log::info!(
            "level {level} residual: {} samples, step {step}, boundary mse {:.5} -> {:.5}, dsc {:.4} -> {:.4}",
            samples,
            audit.boundary_mse_before,
            audit.boundary_mse_after,
            audit.dsc_before,
            audit.dsc_after
        );
        audits.push(audit);
        residual.push(model);
        preds = corrected;
    }

    let model = SegModel {
        frame,
        crop,
        feature_dims,
        threshold: cfg.threshold,
        dilation_radius: cfg.dilation_radius,
        roi_ratio: cfg.roi_ratio,
        initial,
        residual,
    };
    Ok((
        model,
        SegAudit {
            initial: initial_audit,
            levels: audits,
        },
    ))
}

/// Runs the decoder chain on one slice, returning the corrected grid at
/// each level (levels 4, 3, 2, 1), unclamped, over the crop.
pub fn predict_levels(model: &SegModel, sf: &SliceFeatures) -> Result<Vec<LevelGrid>> {
    ensure!(sf.levels.len() == LEVELS, "expected {LEVELS} feature levels");
    for (l, m) in sf.levels.iter().enumerate() {
        ensure!(
            m.cols() == model.feature_dims[l],
            "level {} features have {} channels, model expects {}",
            l + 1,
            m.cols(),
            model.feature_dims[l]
        );
        let (h, w) = model.crop.dims_at(l + 1);
        ensure!(m.rows() == h * w, "level {} features do not match the crop", l + 1);
    }
    let (h4, w4) = model.crop.dims_at(LEVELS);
    let mut grid = LevelGrid::new(LEVELS, h4, w4, model.initial.predict(&sf.levels[LEVELS - 1])?)?;
    let mut out = Vec::with_capacity(LEVELS);
    for level in (1..=LEVELS).rev() {
        if level < LEVELS {
            grid = upsample(&grid)?;
        }
        let delta = model.residual_for(level).predict(&sf.levels[level - 1])?;
        grid.values.iter_mut().zip(&delta).for_each(|(v, d)| *v += d);
        out.push(grid.clone());
    }
    Ok(out)
}

/// Clamped full-resolution probabilities over the crop for one slice.
pub fn predict_slice(model: &SegModel, sf: &SliceFeatures) -> Result<LevelGrid> {
    let levels = predict_levels(model, sf)?;
    Ok(levels.last().expect("four levels").clamped())
}

/// Probability map and binary mask (`H x W x T x 1`) for every time index.
/// Cells outside the crop are zero.
pub fn predict_mask(model: &SegModel, maps: &FeatureMaps) -> Result<(Volume, Volume)> {
    let d = maps.levels.first().ok_or_else(|| Error::invalid("no feature levels"))?.dims();
    ensure!(
        (d.h, d.w) == model.frame,
        "features are {}x{}, model was trained on {}x{}",
        d.h,
        d.w,
        model.frame.0,
        model.frame.1
    );
    let probs: Vec<LevelGrid> = (0..d.t)
        .map(|t| predict_slice(model, &slice_features(maps, t, &model.crop)?))
        .collect::<Result<_>>()?;
    let dims = Dims::new(d.h, d.w, d.t, 1);
    let mut prob = Volume::zeros(dims);
    let mut mask = Volume::zeros(dims);
    for (t, g) in probs.iter().enumerate() {
        for (i, p) in uncrop(model, g).into_iter().enumerate() {
            let (y, x) = (i / d.w, i % d.w);
            prob.set(y, x, t, 0, p as f32);
            mask.set(y, x, t, 0, (p >= model.threshold) as u8 as f32);
        }
    }
    Ok((prob, mask))
}

/// Places a crop-sized full-resolution grid into the model's frame, with
/// zeros outside the crop.
pub fn uncrop(model: &SegModel, grid: &LevelGrid) -> Vec<f64> {
    let (h, w) = model.frame;
    let c = model.crop;
    let mut out = vec![0.0; h * w];
    for y in c.h0..c.h1 {
        for x in c.w0..c.w1 {
            out[y * w + x] = grid.get(y - c.h0, x - c.w0);
        }
    }
    out
}
