//! Stage orchestration shared by the command-line tool and the tests.
//!
//! A dataset directory holds `manifest.csv`, `volumes/<name>.glvol` and,
//! for labelled cases, `masks/<name>.mask.glvol` (`H x W x 2 x 1`,
//! end-diastolic then end-systolic).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::cls::{self, build_descriptor, classify, ClsConfig, ClsModel, ClsPrediction, FeatureDescriptor, HopMask};
use crate::config::RunConfig;
use crate::encoder::{encode, fit_encoder, EncoderModel, FeatureMaps};
use crate::error::{ensure, Error, Result};
use crate::io::container::ModelContainer;
use crate::io::manifest::{parse_manifest, LvefClass, Manifest, ManifestRow, Split};
use crate::io::phantom::{generate_phantoms, manifest_for, PhantomSpec};
use crate::io::preprocess::{preprocess, PreprocessConfig};
use crate::io::volume_file::{read_volume, write_volume};
use crate::io::{csv_text, write_atomic};
use crate::metrics::{dice, iou, ConfusionMatrix, Summary};
use crate::seg::{crop_mask, predict_mask, slice_features, train_seg, CropBox, SegAudit, SegModel, SegTrainSlice};
use crate::volume::Volume;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const VOLUME_DIR: &str = "volumes";
pub const MASK_DIR: &str = "masks";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
const PHASES: [&str; 2] = ["edv", "esv"];

pub fn volume_file(name: &str) -> String {
    format!("{name}.glvol")
}

pub fn mask_file(name: &str) -> String {
    format!("{name}.mask.glvol")
}

pub fn prob_file(name: &str) -> String {
    format!("{name}.prob.glvol")
}

/// One loaded case. Volumes are raw (not yet preprocessed).
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub class: Option<LvefClass>,
    pub volume: Volume,
    pub masks: Option<Volume>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = parse_manifest(&root.join(MANIFEST_FILE))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn rows(&self, split: Split) -> Vec<&ManifestRow> {
        self.manifest.split(split).collect()
    }

    pub fn load_case(&self, row: &ManifestRow, with_masks: bool) -> Result<Case> {
        let volume = read_volume(&self.root.join(VOLUME_DIR).join(volume_file(&row.file_name)))?;
        let masks = if with_masks {
            Some(read_volume(&self.root.join(MASK_DIR).join(mask_file(&row.file_name)))?)
        } else {
            None
        };
        Ok(Case {
            name: row.file_name.clone(),
            class: Some(row.class()),
            volume,
            masks,
        })
    }

    pub fn load_split(&self, split: Split, with_masks: bool) -> Result<Vec<Case>> {
        let cases: Vec<Case> = self
            .rows(split)
            .into_iter()
            .map(|r| self.load_case(r, with_masks))
            .collect::<Result<_>>()?;
        ensure!(!cases.is_empty(), "split {} of {} is empty", split.as_str(), self.root.display());
        Ok(cases)
    }
}

/// Generates phantoms and writes them as a dataset directory.
pub fn write_phantom_dataset(root: &Path, spec: &PhantomSpec, splits: &[(Split, usize)]) -> Result<Manifest> {
    let cases = generate_phantoms(spec, splits)?;
    for c in &cases {
        write_volume(&c.volume, &root.join(VOLUME_DIR).join(volume_file(&c.name)))?;
        write_volume(&c.masks, &root.join(MASK_DIR).join(mask_file(&c.name)))?;
    }
    let manifest = manifest_for(&cases);
    write_atomic(&root.join(MANIFEST_FILE), manifest.to_csv()?.as_bytes())?;
    Ok(manifest)
}

/// Binary mask of phase `k` (0 end-diastolic, 1 end-systolic).
pub fn phase_mask(masks: &Volume, k: usize) -> Result<Vec<bool>> {
    let d = masks.dims();
    ensure!(d.c == 1 && d.t == 2, "mask volume must be H x W x 2 x 1, got {d}");
    Ok(masks.frame(k, 0).iter().map(|&v| v >= 0.5).collect())
}

pub fn fit_encoder_stage(cases: &[Case], cfg: &RunConfig) -> Result<EncoderModel> {
    let vols: Vec<Volume> = cases
        .iter()
        .map(|c| preprocess(&c.volume, &cfg.preprocess))
        .collect::<Result<_>>()?;
    log::info!("fitting encoder on {} volumes", vols.len());
    fit_encoder(&vols, &cfg.encoder)
}

pub fn encode_raw(encoder: &EncoderModel, pre: &PreprocessConfig, volume: &Volume) -> Result<FeatureMaps> {
    encode(encoder, &preprocess(volume, pre)?)
}

/// Crop box from every phase mask of the training cases.
pub fn training_crop(cases: &[Case], cfg: &RunConfig) -> Result<CropBox> {
    let n = cfg.preprocess.size;
    let mut masks = Vec::new();
    for c in cases {
        let m = c
            .masks
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("case {} has no masks", c.name)))?;
        let d = m.dims();
        ensure!(
            d.h == n && d.w == n,
            "masks of {} are {}x{}, expected {n}x{n}",
            c.name,
            d.h,
            d.w
        );
        for k in 0..2 {
            masks.push(phase_mask(m, k)?);
        }
    }
    CropBox::from_masks(masks.iter().map(Vec::as_slice), n, n, cfg.seg.crop_margin)
}

/// Labelled slices of one encoded case for segmentation training.
pub fn case_slices(maps: &FeatureMaps, case: &Case, crop: &CropBox, cfg: &RunConfig) -> Result<Vec<SegTrainSlice>> {
    let masks = case
        .masks
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("case {} has no masks", case.name)))?;
    let n = cfg.preprocess.size;
    (0..2)
        .map(|k| {
            Ok(SegTrainSlice {
                features: slice_features(maps, cfg.mask_frames[k], crop)?,
                mask: crop_mask(&phase_mask(masks, k)?, n, crop),
            })
        })
        .collect()
}

pub fn train_seg_stage(encoder: &EncoderModel, cases: &[Case], cfg: &RunConfig) -> Result<(SegModel, SegAudit)> {
    let crop = training_crop(cases, cfg)?;
    let mut slices = Vec::with_capacity(2 * cases.len());
    for c in cases {
        let maps = encode_raw(encoder, &cfg.preprocess, &c.volume)?;
        slices.extend(case_slices(&maps, c, &crop, cfg)?);
    }
    let n = cfg.preprocess.size;
    train_seg(&slices, crop, (n, n), &cfg.seg)
}

pub fn descriptor_of(encoder: &EncoderModel, maps: &FeatureMaps) -> Result<FeatureDescriptor> {
    build_descriptor(maps, &encoder.per_hop_channel_counts())
}

pub fn channels_of(encoder: &EncoderModel) -> Result<[usize; 4]> {
    encoder
        .per_hop_channel_counts()
        .try_into()
        .map_err(|_| Error::invalid("encoder must have four hops"))
}

pub fn case_labels(cases: &[Case]) -> Result<Vec<LvefClass>> {
    cases
        .iter()
        .map(|c| c.class.ok_or_else(|| Error::invalid(format!("case {} has no class label", c.name))))
        .collect()
}

pub fn descriptors_stage(encoder: &EncoderModel, cases: &[Case], pre: &PreprocessConfig) -> Result<Vec<FeatureDescriptor>> {
    cases
        .iter()
        .map(|c| descriptor_of(encoder, &encode_raw(encoder, pre, &c.volume)?))
        .collect()
}

pub fn train_cls_stage(
    encoder: &EncoderModel,
    descs: &[FeatureDescriptor],
    labels: &[LvefClass],
    cfg: &ClsConfig,
) -> Result<ClsModel> {
    cls::train_classifier(descs, labels, channels_of(encoder)?, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsScore {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

pub fn score_classifier(model: &ClsModel, descs: &[FeatureDescriptor], labels: &[LvefClass]) -> Result<ClsScore> {
    let pred: Vec<usize> = descs
        .iter()
        .map(|d| classify(model, d).map(|(c, _)| c.index()))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let confusion = ConfusionMatrix::from_labels(&truth, &pred, cls::NUM_CLASSES)?;
    Ok(ClsScore {
        accuracy: confusion.accuracy()?,
        balanced_accuracy: confusion.balanced_accuracy()?,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub hops: HopMask,
    pub descriptor_len: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
}

/// Trains one classifier per hop subset and scores it on held-out data.
pub fn ablate_hops(
    encoder: &EncoderModel,
    train: (&[FeatureDescriptor], &[LvefClass]),
    eval: (&[FeatureDescriptor], &[LvefClass]),
    cfg: &ClsConfig,
) -> Result<Vec<AblationRow>> {
    HopMask::ablation_subsets()
        .into_iter()
        .map(|hops| {
            let sub = ClsConfig { hops, ..cfg.clone() };
            let model = train_cls_stage(encoder, train.0, train.1, &sub)?;
            let s = score_classifier(&model, eval.0, eval.1)?;
            log::info!("hops {hops}: accuracy {:.4}, balanced {:.4}", s.accuracy, s.balanced_accuracy);
            Ok(AblationRow {
                hops,
                descriptor_len: model.descriptor_len(),
                accuracy: s.accuracy,
                balanced_accuracy: s.balanced_accuracy,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let on = |h: usize| if r.hops.contains(h) { "+" } else { "-" }.to_string();
            vec![
                (i + 1).to_string(),
                on(0),
                on(1),
                on(2),
                on(3),
                r.descriptor_len.to_string(),
                format!("{}", r.accuracy),
                format!("{}", r.balanced_accuracy),
            ]
        })
        .collect();
    csv_text(
        &["row", "hop1", "hop2", "hop3", "hop4", "features", "accuracy", "balanced_accuracy"],
        &body,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tasks {
    pub seg: bool,
    pub cls: bool,
}

impl Tasks {
    pub fn available(model: &ModelContainer) -> Self {
        let c = model.capabilities();
        Tasks {
            seg: c.segmentation,
            cls: c.classification,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub prob: Option<Volume>,
    pub mask: Option<Volume>,
    pub class: Option<(LvefClass, [f64; 3])>,
}

pub fn infer(model: &ModelContainer, volume: &Volume, tasks: Tasks) -> Result<Inference> {
    let seg = if tasks.seg { Some(model.require_seg()?) } else { None };
    let cls = if tasks.cls { Some(model.require_cls()?) } else { None };
    let maps = encode_raw(&model.encoder, &model.preprocess, volume)?;
    let (prob, mask) = match seg {
        Some(s) => {
            let (p, m) = predict_mask(s, &maps)?;
            (Some(p), Some(m))
        }
        None => (None, None),
    };
    let class = match cls {
        Some(c) => Some(classify(c, &descriptor_of(&model.encoder, &maps)?)?),
        None => None,
    };
    Ok(Inference { prob, mask, class })
}

/// Writes masks, probability maps and `predictions.csv` for named inputs.
pub fn write_inference(out: &Path, results: &[(String, Inference)], truth: Option<&Manifest>) -> Result<()> {
    let mut preds = Vec::new();
    for (name, r) in results {
        if let Some(m) = &r.mask {
            write_volume(m, &out.join(mask_file(name)))?;
        }
        if let Some(p) = &r.prob {
            write_volume(p, &out.join(prob_file(name)))?;
        }
        if let Some((class, probabilities)) = r.class {
            preds.push(ClsPrediction {
                file: name.clone(),
                class,
                probabilities,
                truth: truth.and_then(|m| m.find(name)).map(|r| r.class()),
            });
        }
    }
    if !preds.is_empty() {
        write_atomic(&out.join(PREDICTIONS_FILE), cls::predictions_csv(&preds)?.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegCaseScore {
    pub file: String,
    pub phase: &'static str,
    pub dsc: f64,
    pub iou: f64,
}

/// Frames of `vol` to compare against the two ground-truth phases.
fn phase_frames(pred: &Volume, mask_frames: [usize; 2]) -> Result<[usize; 2]> {
    let t = pred.dims().t;
    if t == 2 {
        return Ok([0, 1]);
    }
    ensure!(
        mask_frames.iter().all(|&f| f < t),
        "predicted mask has {t} frames, cannot select {:?}",
        mask_frames
    );
    Ok(mask_frames)
}

/// Scores `pred_dir/<name>.mask.glvol` against `gt_dir/<name>.mask.glvol`
/// for every listed name.
pub fn evaluate_masks(pred_dir: &Path, gt_dir: &Path, names: &[String], mask_frames: [usize; 2]) -> Result<Vec<SegCaseScore>> {
    let mut out = Vec::new();
    for name in names {
        let pred = read_volume(&pred_dir.join(mask_file(name)))?;
        let gt = read_volume(&gt_dir.join(mask_file(name)))?;
        let (pd, gd) = (pred.dims(), gt.dims());
        ensure!(
            pd.h == gd.h && pd.w == gd.w && pd.c == 1,
            "prediction for {name} is {pd}, ground truth is {gd}"
        );
        let frames = phase_frames(&pred, mask_frames)?;
        for (k, &f) in frames.iter().enumerate() {
            let p: Vec<bool> = pred.frame(f, 0).iter().map(|&v| v >= 0.5).collect();
            let g = phase_mask(&gt, k)?;
            out.push(SegCaseScore {
                file: name.clone(),
                phase: PHASES[k],
                dsc: dice(&p, &g)?,
                iou: iou(&p, &g)?,
            });
        }
    }
    Ok(out)
}

/// Per-case rows followed by mean, median, q1 and q3 rows.
pub fn seg_metrics_csv(scores: &[SegCaseScore]) -> Result<String> {
    let mut rows: Vec<Vec<String>> = scores
        .iter()
        .map(|s| vec![s.file.clone(), s.phase.to_string(), format!("{}", s.dsc), format!("{}", s.iou)])
        .collect();
    let d = Summary::of(&scores.iter().map(|s| s.dsc).collect::<Vec<_>>())?;
    let j = Summary::of(&scores.iter().map(|s| s.iou).collect::<Vec<_>>())?;
    for (label, a, b) in [
        ("mean", d.mean, j.mean),
        ("median", d.median, j.median),
        ("q1", d.q1, j.q1),
        ("q3", d.q3, j.q3),
    ] {
        rows.push(vec![label.to_string(), "all".to_string(), format!("{a}"), format!("{b}")]);
    }
    csv_text(&["file", "phase", "dsc", "iou"], &rows)
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    file: String,
    predicted_class: usize,
}

/// Joins `predictions.csv` with the manifest's classes.
pub fn evaluate_predictions(predictions_csv: &str, manifest: &Manifest) -> Result<ClsScoreReport> {
    let mut rdr = csv::Reader::from_reader(predictions_csv.as_bytes());
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.deserialize::<PredictionRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i + 1,
            column: "record".into(),
            message: e.to_string(),
        })?;
        let row = manifest.find(&rec.file).ok_or_else(|| Error::Parse {
            row: i + 1,
            column: "file".into(),
            message: format!("`{}` is not in the manifest", rec.file),
        })?;
        ensure!(
            (1..=3).contains(&rec.predicted_class),
            "predicted class {} of {} is not 1, 2 or 3",
            rec.predicted_class,
            rec.file
        );
        truth.push(row.class().index());
        pred.push(rec.predicted_class - 1);
    }
    let confusion = ConfusionMatrix::from_labels(&truth, &pred, cls::NUM_CLASSES)?;
    Ok(ClsScoreReport {
        accuracy: confusion.accuracy()?,
        balanced_accuracy: confusion.balanced_accuracy().ok(),
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsScoreReport {
    pub accuracy: f64,
    /// `None` when some class has no true samples.
    pub balanced_accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl ClsScoreReport {
    pub fn metrics_csv(&self) -> Result<String> {
        let rows = vec![
            vec!["accuracy".to_string(), format!("{}", self.accuracy)],
            vec![
                "balanced_accuracy".to_string(),
                self.balanced_accuracy.map_or(String::new(), |b| format!("{b}")),
            ],
            vec!["count".to_string(), self.confusion.total().to_string()],
        ];
        csv_text(&["metric", "value"], &rows)
    }

    pub fn confusion_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .confusion
            .counts
            .iter()
            .enumerate()
            .map(|(t, r)| {
                std::iter::once(format!("class{}", t + 1))
                    .chain(r.iter().map(|n| n.to_string()))
                    .collect()
            })
            .collect();
        csv_text(&["true\\predicted", "class1", "class2", "class3"], &rows)
    }
}

/// One spectrum CSV per hop plus a summary, as `(file name, contents)`.
pub fn energy_csvs(encoder: &EncoderModel) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let mut summary = Vec::new();
    let mut header: Vec<String> = vec!["hop".into(), "channels".into(), "kept_ac".into()];
    for (i, hop) in encoder.hops().iter().enumerate() {
        let r = hop.energy_report();
        let rows: Vec<Vec<String>> = r
            .eigenvalues
            .iter()
            .zip(&r.cumulative_ratio)
            .enumerate()
            .map(|(k, (l, c))| vec![(k + 1).to_string(), format!("{l}"), format!("{c}"), ((k < r.k_kept) as u8).to_string()])
            .collect();
        files.push((
            format!("energy_hop{}.csv", i + 1),
            csv_text(&["index", "eigenvalue", "cumulative_ratio", "kept"], &rows)?,
        ));
        if i == 0 {
            header.extend(r.k_at.iter().map(|(t, _)| format!("k_at_{t}")));
        }
        let mut row = vec![(i + 1).to_string(), hop.output_channels().to_string(), r.k_kept.to_string()];
        row.extend(r.k_at.iter().map(|(_, k)| k.to_string()));
        summary.push(row);
    }
    ensure!(
        summary.iter().all(|r| r.len() == header.len()),
        "hops report different threshold sets"
    );
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    files.push(("energy_summary.csv".to_string(), csv_text(&h, &summary)?));
    Ok(files)
}
