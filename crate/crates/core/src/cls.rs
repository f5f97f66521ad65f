//! Pooled multi-level descriptors and the three-class EF classifier.
//!
//! Hops 1 and 4 are pooled with a 2x2x1 spatial pyramid (bin means), hops 2
//! and 3 with global mean and max per channel.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureMaps, NUM_HOPS};
use crate::error::{ensure, Error, Result};
use crate::gbt::{self, Candidates, FeatureMatrix, GbtParams, TreeEnsemble};
use crate::io::manifest::LvefClass;
use crate::volume::Volume;

pub const NUM_CLASSES: usize = 3;

/// 2x2x1 spatial pyramid: per bin and channel, the mean over the bin and all
/// time indices. Bins are row-major; the first row/column takes
/// `ceil(dim / 2)` cells.
pub fn spp_pool(f: &Volume) -> Result<Vec<f64>> {
    let d = f.dims();
    ensure!(d.h >= 2 && d.w >= 2, "spatial pyramid pooling needs at least 2x2, got {}x{}", d.h, d.w);
    let (sh, sw) = (d.h.div_ceil(2), d.w.div_ceil(2));
    let mut out = vec![0.0; 4 * d.c];
    for (b, (hr, wr)) in [(0..sh, 0..sw), (0..sh, sw..d.w), (sh..d.h, 0..sw), (sh..d.h, sw..d.w)]
        .into_iter()
        .enumerate()
    {
        let n = (hr.len() * wr.len() * d.t) as f64;
        let acc = &mut out[b * d.c..(b + 1) * d.c];
        for y in hr.clone() {
            for x in wr.clone() {
                for t in 0..d.t {
                    for (a, &v) in acc.iter_mut().zip(f.voxel(y, x, t)) {
                        *a += v as f64;
                    }
                }
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(out)
}

/// Global pooling: all channel means, then all channel maxima.
pub fn gap_pool(f: &Volume) -> Result<Vec<f64>> {
    let d = f.dims();
    ensure!(d.voxels() > 0 && d.c > 0, "global pooling of an empty map");
    let mut sum = vec![0.0f64; d.c];
    let mut max = vec![f64::NEG_INFINITY; d.c];
    for vox in f.data().chunks_exact(d.c) {
        for c in 0..d.c {
            sum[c] += vox[c] as f64;
            max[c] = max[c].max(vox[c] as f64);
        }
    }
    let n = d.voxels() as f64;
    Ok(sum.into_iter().map(|s| s / n).chain(max).collect())
}

fn uses_spp(hop: usize) -> bool {
    hop == 0 || hop == NUM_HOPS - 1
}

/// Descriptor length contributed by a hop with `channels` channels.
pub fn hop_descriptor_len(hop: usize, channels: usize) -> usize {
    if uses_spp(hop) {
        4 * channels
    } else {
        2 * channels
    }
}

/// Which hops feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HopMask(pub [bool; NUM_HOPS]);

impl HopMask {
    pub const ALL: HopMask = HopMask([true; NUM_HOPS]);

    /// The ablation subsets, best-ranked first.
    pub fn ablation_subsets() -> [HopMask; 7] {
        ["1234", "234", "34", "4", "123", "1", "12"].map(|s| s.parse().expect("valid subset"))
    }

    pub fn contains(&self, hop: usize) -> bool {
        self.0[hop]
    }
}

impl Default for HopMask {
    fn default() -> Self {
        HopMask::ALL
    }
}

impl fmt::Display for HopMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &on) in self.0.iter().enumerate() {
            if on {
                write!(f, "{}", i + 1)?;
            }
        }
        Ok(())
    }
}

impl FromStr for HopMask {
    type Err = Error;

    /// Digits naming the hops, e.g. `"34"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = [false; NUM_HOPS];
        for ch in s.chars() {
            let hop = ch
                .to_digit(10)
                .filter(|d| (1..=NUM_HOPS as u32).contains(d))
                .ok_or_else(|| Error::invalid(format!("'{ch}' in hop subset '{s}' is not a hop number")))?;
            ensure!(!m[hop as usize - 1], "hop {hop} listed twice in '{s}'");
            m[hop as usize - 1] = true;
        }
        ensure!(m.iter().any(|&b| b), "hop subset is empty");
        Ok(HopMask(m))
    }
}

impl Serialize for HopMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for HopMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Pooled vectors per hop, in hop order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDescriptor {
    pub hops: [Vec<f64>; NUM_HOPS],
}

impl FeatureDescriptor {
    pub fn hop_lens(&self) -> [usize; NUM_HOPS] {
        std::array::from_fn(|i| self.hops[i].len())
    }

    pub fn len(&self) -> usize {
        self.hops.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation of the selected hops.
    pub fn masked(&self, mask: HopMask) -> Vec<f64> {
        (0..NUM_HOPS)
            .filter(|&h| mask.contains(h))
            .flat_map(|h| self.hops[h].iter().copied())
            .collect()
    }

    pub fn concatenated(&self) -> Vec<f64> {
        self.masked(HopMask::ALL)
    }
}

/// Pools one encoding. `channels` is the encoder's per-hop channel count.
pub fn build_descriptor(maps: &FeatureMaps, channels: &[usize]) -> Result<FeatureDescriptor> {
    ensure!(
        maps.levels.len() == NUM_HOPS && channels.len() == NUM_HOPS,
        "expected {NUM_HOPS} feature maps"
    );
    let mut hops: [Vec<f64>; NUM_HOPS] = Default::default();
    for (h, part) in hops.iter_mut().enumerate() {
        let f = &maps.levels[h];
        ensure!(
            f.dims().c == channels[h],
            "hop {} map has {} channels, encoder reports {}",
            h + 1,
            f.dims().c,
            channels[h]
        );
        *part = if uses_spp(h) { spp_pool(f)? } else { gap_pool(f)? };
    }
    Ok(FeatureDescriptor { hops })
}

/// Column names for a descriptor, e.g. `h1_b2_c7`, `h2_max_c0`.
pub fn descriptor_columns(channels: &[usize], mask: HopMask) -> Vec<String> {
    let mut cols = Vec::new();
    for (h, &c) in channels.iter().enumerate().filter(|(h, _)| mask.contains(*h)) {
        if uses_spp(h) {
            for b in 0..4 {
                cols.extend((0..c).map(|k| format!("h{}_b{b}_c{k}", h + 1)));
            }
        } else {
            for stat in ["mean", "max"] {
                cols.extend((0..c).map(|k| format!("h{}_{stat}_c{k}", h + 1)));
            }
        }
    }
    cols
}

/// One row per sample: name, then the masked descriptor.
pub fn descriptors_csv(names: &[String], descs: &[FeatureDescriptor], channels: &[usize], mask: HopMask) -> Result<String> {
    ensure!(names.len() == descs.len(), "{} names for {} descriptors", names.len(), descs.len());
    let columns = descriptor_columns(channels, mask);
    let mut header = vec!["file"];
    header.extend(columns.iter().map(String::as_str));
    let mut rows = Vec::with_capacity(descs.len());
    for (n, d) in names.iter().zip(descs) {
        let mut row = vec![n.clone()];
        row.extend(d.masked(mask).iter().map(|v| format!("{v}")));
        ensure!(row.len() == header.len(), "descriptor of {n} does not match the channel bookkeeping");
        rows.push(row);
    }
    crate::io::csv_text(&header, &rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oversample {
    None,
    /// Raise every class to the largest class count.
    Balance,
    /// Explicit per-class targets, classes 1..=3.
    Targets([usize; NUM_CLASSES]),
}

impl Oversample {
    pub fn targets(&self, counts: [usize; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
        match self {
            Oversample::None => counts,
            Oversample::Balance => [*counts.iter().max().expect("three classes"); NUM_CLASSES],
            Oversample::Targets(t) => *t,
        }
    }
}

/// Which originals were duplicated and how often.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AugmentationRecord {
    pub original_counts: [usize; NUM_CLASSES],
    pub final_counts: [usize; NUM_CLASSES],
    /// `(original index, copies)` for every duplicated sample, by index.
    pub copies: Vec<(usize, usize)>,
}

impl AugmentationRecord {
    pub fn is_identity(&self) -> bool {
        self.copies.is_empty()
    }

    /// Per-class counts before and after augmentation.
    pub fn csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = (0..NUM_CLASSES)
            .map(|c| {
                vec![
                    (c + 1).to_string(),
                    self.original_counts[c].to_string(),
                    self.final_counts[c].to_string(),
                ]
            })
            .collect();
        crate::io::csv_text(&["class", "original", "augmented"], &rows)
    }
}

pub fn class_counts(labels: &[LvefClass]) -> [usize; NUM_CLASSES] {
    let mut n = [0; NUM_CLASSES];
    for l in labels {
        n[l.index()] += 1;
    }
    n
}

/// Duplicates samples drawn with replacement from each class until the
/// class reaches its target. Returns the indices of the augmented set (the
/// originals in order, then the copies) and the record.
pub fn oversample(
    labels: &[LvefClass],
    targets: [usize; NUM_CLASSES],
    seed: u64,
) -> Result<(Vec<usize>, AugmentationRecord)> {
    let counts = class_counts(labels);
    for c in 0..NUM_CLASSES {
        ensure!(
            targets[c] >= counts[c],
            "target {} for class {} is below its current count {}",
            targets[c],
            c + 1,
            counts[c]
        );
        ensure!(
            targets[c] == counts[c] || counts[c] > 0,
            "class {} has no samples to duplicate",
            c + 1
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut copies = vec![0usize; labels.len()];
    for c in 0..NUM_CLASSES {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].index() == c).collect();
        for _ in counts[c]..targets[c] {
            let i = members[rng.gen_range(0..members.len())];
            copies[i] += 1;
            order.push(i);
        }
    }
    let record = AugmentationRecord {
        original_counts: counts,
        final_counts: targets,
        copies: copies.into_iter().enumerate().filter(|&(_, n)| n > 0).collect(),
    };
    Ok((order, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsConfig {
    pub hops: HopMask,
    pub oversample: Oversample,
    pub gbt: GbtParams,
    pub seed: u64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        ClsConfig {
            hops: HopMask::ALL,
            oversample: Oversample::None,
            gbt: GbtParams {
                rounds: 100,
                max_depth: 3,
                min_samples_leaf: 2,
                candidates: Candidates::Quantile(32),
                ..GbtParams::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsModel {
    pub hops: HopMask,
    /// Per-hop encoder channel counts the descriptor schema was built from.
    pub channels: [usize; NUM_HOPS],
    pub ensemble: TreeEnsemble,
    pub augmentation: AugmentationRecord,
}

impl ClsModel {
    pub fn descriptor_len(&self) -> usize {
        (0..NUM_HOPS)
            .filter(|&h| self.hops.contains(h))
            .map(|h| hop_descriptor_len(h, self.channels[h]))
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.ensemble.parameter_count()
    }
}

fn to_row(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn train_classifier(
    descs: &[FeatureDescriptor],
    labels: &[LvefClass],
    channels: [usize; NUM_HOPS],
    cfg: &ClsConfig,
) -> Result<ClsModel> {
    ensure!(!descs.is_empty(), "classification training set is empty");
    ensure!(descs.len() == labels.len(), "{} descriptors for {} labels", descs.len(), labels.len());
    for d in descs {
        for h in 0..NUM_HOPS {
            ensure!(
                d.hops[h].len() == hop_descriptor_len(h, channels[h]),
                "hop {} descriptor has length {}, expected {}",
                h + 1,
                d.hops[h].len(),
                hop_descriptor_len(h, channels[h])
            );
        }
    }
    let targets = cfg.oversample.targets(class_counts(labels));
    let (order, augmentation) = oversample(labels, targets, cfg.seed)?;
    let final_counts = augmentation.final_counts;
    if let Some(c) = final_counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "class {} has no training samples; oversample it or add data",
            c + 1
        )));
    }
    let rows: Vec<Vec<f32>> = order.iter().map(|&i| to_row(&descs[i].masked(cfg.hops))).collect();
    let y: Vec<usize> = order.iter().map(|&i| labels[i].index()).collect();
    let x = FeatureMatrix::from_rows(&rows)?;
    let ensemble = gbt::fit_classifier(&x, &y, NUM_CLASSES, &cfg.gbt)?;
    Ok(ClsModel {
        hops: cfg.hops,
        channels,
        ensemble,
        augmentation,
    })
}

/// Argmax class (ties go to the lower class) and the class probabilities.
pub fn classify(model: &ClsModel, desc: &FeatureDescriptor) -> Result<(LvefClass, [f64; NUM_CLASSES])> {
    let v = desc.masked(model.hops);
    ensure!(
        v.len() == model.descriptor_len(),
        "descriptor has {} values, model expects {}",
        v.len(),
        model.descriptor_len()
    );
    let p = model.ensemble.predict_proba_row(&to_row(&v))?;
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if p[c] > p[best] {
            best = c;
        }
    }
    Ok((LvefClass::ALL[best], [p[0], p[1], p[2]]))
}

/// One prediction row for the predictions CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsPrediction {
    pub file: String,
    pub class: LvefClass,
    pub probabilities: [f64; NUM_CLASSES],
    pub truth: Option<LvefClass>,
}

pub fn predictions_csv(preds: &[ClsPrediction]) -> Result<String> {
    let header = ["file", "predicted_class", "p_class1", "p_class2", "p_class3", "true_class"];
    let mut rows = Vec::with_capacity(preds.len());
    for p in preds {
        rows.push(vec![
            p.file.clone(),
            p.class.number().to_string(),
            format!("{}", p.probabilities[0]),
            format!("{}", p.probabilities[1]),
            format!("{}", p.probabilities[2]),
            p.truth.map_or(String::new(), |t| t.number().to_string()),
        ]);
    }
    crate::io::csv_text(&header, &rows)
}
