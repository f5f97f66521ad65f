//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! The phantom experiment (150 train / 50 test) is built once and shared by
//! the criteria that need a trained model.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use echohop::census::Census;
use echohop::cls::{ClsConfig, ClsModel, FeatureDescriptor, HopMask, Oversample};
use echohop::config::RunConfig;
use echohop::encoder::{encode, extract_neighborhoods, max_pool, pad_to_even, EncoderModel, FeatureMaps};
use echohop::io::csv_text;
use echohop::io::container::{load_model, save_model, ModelContainer};
use echohop::io::manifest::{LvefClass, Split};
use echohop::io::phantom::background_volume;
use echohop::io::preprocess::preprocess;
use echohop::metrics::{dice, iou};
use echohop::pipeline::{
    ablate_hops, ablation_csv, case_labels, descriptor_of, descriptors_stage, energy_csvs, evaluate_masks,
    evaluate_predictions, fit_encoder_stage, infer, phase_mask, score_classifier, seg_metrics_csv, train_cls_stage,
    train_seg_stage, training_crop, write_inference, write_phantom_dataset, Case, Dataset, Inference, Tasks,
    MASK_DIR, PREDICTIONS_FILE,
};
use echohop::saab::{reconstruction_error_parts, PatchSet};
use echohop::seg::{
    crop_mask, predict_mask, predict_slice, slice_features, train_seg, uncrop, CropBox, SegAudit, SegModel, SegTrainSlice,
    SliceFeatures,
};
use echohop::volume::Volume;

mod common;
use common::*;

const MASTER_SEED: u64 = 20_251_019;
const TRAIN: usize = 150;
const TEST: usize = 50;
/// Training volumes whose every patch is reconstructed for the energy check.
const ENERGY_VOLUMES: usize = 10;
/// Class-2 training cases kept in the imbalanced run.
const IMBALANCED_CLASS2: usize = 10;

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> String) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s] {detail}"),
            Err(e) => {
                self.failures += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("criterion {id:>2} FAIL  {name} [{secs:.1}s] {msg}");
            }
        }
    }
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Wall-clock budget stated for a 4-core machine, scaled to this one.
fn budget(four_core_secs: f64) -> f64 {
    four_core_secs * 4.0 / cores().min(4) as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ------------------------------------------------------------ experiment

struct Encoded {
    case: Case,
    slices: Vec<SliceFeatures>,
    descriptor: FeatureDescriptor,
}

struct Experiment {
    cfg: RunConfig,
    encoder: EncoderModel,
    train: Vec<Encoded>,
    test: Vec<Encoded>,
    /// Hop inputs of the first training volumes, per hop.
    hop_inputs: Vec<Vec<Volume>>,
    crop: CropBox,
    setup_secs: f64,
}

fn hop_inputs(vol: &Volume, maps: &FeatureMaps) -> Vec<Volume> {
    let mut out = vec![vol.clone()];
    for l in 0..3 {
        out.push(max_pool(&pad_to_even(&maps.levels[l])).unwrap());
    }
    out
}

fn build_experiment() -> Experiment {
    let start = Instant::now();
    let cfg = RunConfig::with_seed(MASTER_SEED).resolved();
    let cases = phantom_cases(&cfg, &[(Split::Train, TRAIN), (Split::Test, TEST)]);
    let (train_cases, test_cases) = cases.split_at(TRAIN);
    let encoder = fit_encoder_stage(train_cases, &cfg).unwrap();
    let crop = training_crop(train_cases, &cfg).unwrap();
    let mut inputs = vec![Vec::new(); 4];
    let mut encode_all = |cases: &[Case], keep_inputs: bool| -> Vec<Encoded> {
        cases
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let vol = preprocess(&c.volume, &cfg.preprocess).unwrap();
                let maps = encode(&encoder, &vol).unwrap();
                if keep_inputs && i < ENERGY_VOLUMES {
                    for (l, v) in hop_inputs(&vol, &maps).into_iter().enumerate() {
                        inputs[l].push(v);
                    }
                }
                Encoded {
                    case: c.clone(),
                    slices: cfg
                        .mask_frames
                        .iter()
                        .map(|&t| slice_features(&maps, t, &crop).unwrap())
                        .collect(),
                    descriptor: descriptor_of(&encoder, &maps).unwrap(),
                }
            })
            .collect()
    };
    let train = encode_all(train_cases, true);
    let test = encode_all(test_cases, false);
    Experiment {
        cfg,
        encoder,
        train,
        test,
        hop_inputs: inputs,
        crop,
        setup_secs: start.elapsed().as_secs_f64(),
    }
}

// ------------------------------------------------------------ criteria

fn criterion_saab() -> String {
    let start = Instant::now();
    for &(n, d) in &SAAB_DATASETS {
        for seed in 0..3 {
            check_saab_dataset(n, d, seed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "took {secs:.1}s, limit 30s");
    format!("{} datasets x 3 seeds", SAAB_DATASETS.len())
}

fn criterion_select_k() -> String {
    check_select_k_random(1000, 3);
    check_hoplevel_fixture();
    "1000 random spectra, 4 hops x 5 thresholds".into()
}

fn criterion_gbt() -> String {
    for seed in 0..5 {
        check_loss_monotone(seed);
    }
    check_exact_fits();
    for seed in 10..16 {
        check_split_oracle(seed);
    }
    "5 datasets monotone, micro-cases exact, 6 oracle trees equal".into()
}

fn criterion_metrics() -> String {
    check_iou_dice_identity(1000, 8);
    check_classification_hand_cases();
    "1000 mask pairs, hand cases, row sums".into()
}

fn criterion_energy(x: &Experiment) -> String {
    let start = Instant::now();
    let mut ratios = Vec::new();
    for (l, hop) in x.encoder.hops().iter().enumerate() {
        let (s, k) = (hop.config.spatial_window, hop.config.temporal_window);
        let (mut lost, mut total) = (0.0, 0.0);
        for (c, bank) in hop.banks.iter().enumerate() {
            let mut data = Vec::new();
            for v in &x.hop_inputs[l] {
                data.extend_from_slice(extract_neighborhoods(v, s, k, c).unwrap().as_slice());
            }
            let patches = PatchSet::new(bank.dim(), data).unwrap();
            let (a, b) = reconstruction_error_parts(bank, &patches).unwrap();
            lost += a;
            total += b;
        }
        let r = if total > 0.0 { lost / total } else { 0.0 };
        assert!(r <= 0.01 + 1e-6, "hop {}: relative error {r:.6} exceeds 1%", l + 1);
        ratios.push(r);
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "took {secs:.1}s, limit 120s");
    let shown: Vec<String> = ratios.iter().map(|r| format!("{:.4}%", 100.0 * r)).collect();
    format!("relative error per hop [{}] on {ENERGY_VOLUMES} training volumes", shown.join(", "))
}

fn criterion_resolution(x: &Experiment) -> String {
    let vol = preprocess(&x.train[0].case.volume, &x.cfg.preprocess).unwrap();
    check_resolution_chain(&x.encoder, &vol);
    let res: Vec<usize> = x.encoder.per_hop_resolutions().iter().map(|r| r.0).collect();
    assert_eq!(res, [112, 56, 28, 14]);
    let n = x.cfg.preprocess.size;
    let mut masks = 0;
    for e in &x.train {
        let m = e.case.masks.as_ref().unwrap();
        for k in 0..2 {
            check_label_conservation(&phase_mask(m, k).unwrap(), n, n);
            masks += 1;
        }
    }
    format!("levels {res:?}, {masks} masks conserve counts at 8x8")
}

struct SegOutcome {
    model: SegModel,
    detail: String,
}

fn criterion_segmentation(x: &Experiment) -> SegOutcome {
    let start = Instant::now();
    let n = x.cfg.preprocess.size;
    let mut slices = Vec::with_capacity(2 * x.train.len());
    for e in &x.train {
        let m = e.case.masks.as_ref().unwrap();
        for (k, sf) in e.slices.iter().enumerate() {
            slices.push(SegTrainSlice {
                features: sf.clone(),
                mask: crop_mask(&phase_mask(m, k).unwrap(), n, &x.crop),
            });
        }
    }
    let (model, audit) = train_seg(&slices, x.crop, (n, n), &x.cfg.seg).unwrap();
    drop(slices);
    for a in &audit.levels {
        assert!(
            a.dsc_after >= a.dsc_before,
            "level {}: corrected train DSC {:.4} below uncorrected {:.4}",
            a.level,
            a.dsc_after,
            a.dsc_before
        );
    }
    let (mut ds, mut is) = (Vec::new(), Vec::new());
    for e in &x.test {
        let m = e.case.masks.as_ref().unwrap();
        for (k, sf) in e.slices.iter().enumerate() {
            let prob = uncrop(&model, &predict_slice(&model, sf).unwrap());
            let pred: Vec<bool> = prob.iter().map(|&p| p >= model.threshold).collect();
            let gt = phase_mask(m, k).unwrap();
            ds.push(dice(&pred, &gt).unwrap());
            is.push(iou(&pred, &gt).unwrap());
        }
    }
    let (dsc, jac) = (mean(&ds), mean(&is));
    assert!(dsc >= 0.85, "mean test DSC {dsc:.4} below 0.85");
    assert!(jac >= 0.74, "mean test IoU {jac:.4} below 0.74");
    let secs = x.setup_secs + start.elapsed().as_secs_f64();
    assert!(secs < budget(900.0), "took {secs:.0}s, budget {:.0}s", budget(900.0));
    let levels: Vec<String> = audit
        .levels
        .iter()
        .map(|a| format!("L{} {:.3}->{:.3}", a.level, a.dsc_before, a.dsc_after))
        .collect();
    SegOutcome {
        model,
        detail: format!(
            "test DSC {dsc:.4}, IoU {jac:.4} over {} slices; train DSC {}; {secs:.0}s incl. encoder",
            ds.len(),
            levels.join(", ")
        ),
    }
}

fn negative_control(x: &Experiment, seg: &SegModel) -> String {
    let bg = preprocess(&background_volume(&x.cfg.synth, 5).unwrap(), &x.cfg.preprocess).unwrap();
    let maps = encode(&x.encoder, &bg).unwrap();
    let (_, mask) = predict_mask(seg, &maps).unwrap();
    let n = x.cfg.preprocess.size;
    let worst = (0..mask.dims().t)
        .map(|t| mask.frame(t, 0).iter().filter(|&&v| v > 0.5).count())
        .max()
        .unwrap();
    let share = worst as f64 / (n * n) as f64;
    assert!(share <= 0.02, "background input segmented {:.2}% of the frame", 100.0 * share);
    format!("background-only input: at most {:.2}% foreground", 100.0 * share)
}

fn labels(set: &[Encoded]) -> Vec<LvefClass> {
    set.iter().map(|e| e.case.class.unwrap()).collect()
}

fn descs(set: &[Encoded]) -> Vec<FeatureDescriptor> {
    set.iter().map(|e| e.descriptor.clone()).collect()
}

fn criterion_classification(x: &Experiment) -> (ClsModel, String) {
    let (train_d, train_l) = (descs(&x.train), labels(&x.train));
    let (test_d, test_l) = (descs(&x.test), labels(&x.test));
    let model = train_cls_stage(&x.encoder, &train_d, &train_l, &x.cfg.cls).unwrap();
    let s = score_classifier(&model, &test_d, &test_l).unwrap();
    assert!(s.accuracy >= 0.90, "test accuracy {:.4} below 0.90", s.accuracy);
    assert!(s.balanced_accuracy >= 0.85, "test balanced accuracy {:.4} below 0.85", s.balanced_accuracy);

    // Imbalanced training set: only a few class-2 cases.
    let mut seen = 0;
    let keep: Vec<usize> = (0..train_l.len())
        .filter(|&i| {
            if train_l[i] == LvefClass::MildlyReduced {
                seen += 1;
                seen <= IMBALANCED_CLASS2
            } else {
                true
            }
        })
        .collect();
    let imb_d: Vec<FeatureDescriptor> = keep.iter().map(|&i| train_d[i].clone()).collect();
    let imb_l: Vec<LvefClass> = keep.iter().map(|&i| train_l[i]).collect();
    let score_with = |oversample: Oversample| {
        let cfg = ClsConfig {
            oversample,
            ..x.cfg.cls.clone()
        };
        let m = train_cls_stage(&x.encoder, &imb_d, &imb_l, &cfg).unwrap();
        score_classifier(&m, &test_d, &test_l).unwrap()
    };
    let plain = score_with(Oversample::None);
    let balanced = score_with(Oversample::Balance);
    assert!(
        balanced.balanced_accuracy >= plain.balanced_accuracy,
        "balancing lowered balanced accuracy {:.4} -> {:.4}",
        plain.balanced_accuracy,
        balanced.balanced_accuracy
    );

    let rows = ablate_hops(&x.encoder, (&train_d, &train_l), (&test_d, &test_l), &x.cfg.cls).unwrap();
    assert_eq!(rows.len(), 7);
    let acc_of = |m: &str| {
        let mask: HopMask = m.parse().unwrap();
        rows.iter().find(|r| r.hops == mask).unwrap().accuracy
    };
    let (h4, h1) = (acc_of("4"), acc_of("1"));
    assert!(h4 >= h1, "hop-4-only accuracy {h4:.4} below hop-1-only {h1:.4}");
    let table: Vec<String> = rows.iter().map(|r| format!("{}:{:.2}", r.hops, r.accuracy)).collect();
    (
        model,
        format!(
            "test acc {:.4}, BA {:.4}; imbalanced BA {:.4} -> balanced {:.4}; ablation acc [{}]",
            s.accuracy,
            s.balanced_accuracy,
            plain.balanced_accuracy,
            balanced.balanced_accuracy,
            table.join(" ")
        ),
    )
}

fn criterion_census(x: &Experiment, seg: SegModel, cls: ClsModel) -> String {
    let mut model = ModelContainer::new(x.cfg.preprocess.clone(), x.encoder.clone());
    model.seg = Some(seg);
    model.cls = Some(cls);
    let c = Census::of(&model);
    assert!(
        5 * c.total <= c.reference_cnn,
        "model has {} parameters, more than a fifth of {}",
        c.total,
        c.reference_cnn
    );
    format!(
        "total {} (encoder {}, seg {}, cls {}) vs reference {}: {:.1}x smaller",
        c.total,
        c.encoder,
        c.seg,
        c.cls,
        c.reference_cnn,
        c.reduction()
    )
}

// ------------------------------------------------------------ determinism

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::with_seed(MASTER_SEED ^ 0x5a5a);
    cfg.seg.initial.rounds = 15;
    cfg.seg.residual.rounds = 15;
    cfg.cls.gbt.rounds = 15;
    cfg.resolved()
}

/// Synthesis, training, inference and evaluation, writing every artifact
/// under `root`. Returns the in-memory model and its test-set inference.
fn whole_pipeline(root: &Path) -> (ModelContainer, Vec<(String, Inference)>) {
    let cfg = small_run_config();
    let data = root.join("data");
    write_phantom_dataset(&data, &cfg.synth, &[(Split::Train, 12), (Split::Test, 6)]).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let train = ds.load_split(Split::Train, true).unwrap();
    let test = ds.load_split(Split::Test, false).unwrap();

    let encoder = fit_encoder_stage(&train, &cfg).unwrap();
    let (seg, audit) = train_seg_stage(&encoder, &train, &cfg).unwrap();
    let train_d = descriptors_stage(&encoder, &train, &cfg.preprocess).unwrap();
    let train_l = case_labels(&train).unwrap();
    let cls = train_cls_stage(&encoder, &train_d, &train_l, &cfg.cls).unwrap();
    let test_d = descriptors_stage(&encoder, &test, &cfg.preprocess).unwrap();
    let test_l = case_labels(&test).unwrap();
    let ablation = ablate_hops(&encoder, (&train_d, &train_l), (&test_d, &test_l), &cfg.cls).unwrap();

    let mut model = ModelContainer::new(cfg.preprocess.clone(), encoder);
    model.config_echo = Some(cfg.to_toml().unwrap());
    model.seg = Some(seg);
    model.cls = Some(cls);
    let model_dir = root.join("model");
    save_model(&model, &model_dir).unwrap();

    let reports = root.join("reports");
    std::fs::create_dir_all(&reports).unwrap();
    for (name, text) in energy_csvs(&model.encoder).unwrap() {
        std::fs::write(reports.join(name), text).unwrap();
    }
    std::fs::write(reports.join("hop_ablation.csv"), ablation_csv(&ablation).unwrap()).unwrap();
    let audit_csv = csv_text(&SegAudit::CSV_HEADER, &audit.csv_rows()).unwrap();
    std::fs::write(reports.join("seg_audit.csv"), audit_csv).unwrap();

    let results: Vec<(String, Inference)> = test
        .iter()
        .map(|c| (c.name.clone(), infer(&model, &c.volume, Tasks::available(&model)).unwrap()))
        .collect();
    let pred = root.join("pred");
    write_inference(&pred, &results, Some(&ds.manifest)).unwrap();
    let names: Vec<String> = test.iter().map(|c| c.name.clone()).collect();
    let scores = evaluate_masks(&pred, &data.join(MASK_DIR), &names, cfg.mask_frames).unwrap();
    std::fs::write(reports.join("seg_metrics.csv"), seg_metrics_csv(&scores).unwrap()).unwrap();
    let preds = std::fs::read_to_string(pred.join(PREDICTIONS_FILE)).unwrap();
    let cls_report = evaluate_predictions(&preds, &ds.manifest).unwrap();
    std::fs::write(reports.join("cls_metrics.csv"), cls_report.metrics_csv().unwrap()).unwrap();
    std::fs::write(reports.join("confusion.csv"), cls_report.confusion_csv().unwrap()).unwrap();
    (model, results)
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_determinism() -> String {
    let mut trees = Vec::new();
    let mut loaded_ok = 0;
    for threads in [1, 4] {
        let tmp = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let (model, results) = pool.install(|| whole_pipeline(tmp.path()));

        // Reloaded model predicts bit for bit like the in-memory one.
        let back = load_model(&tmp.path().join("model")).unwrap();
        assert_eq!(back, model, "reloaded model differs");
        let ds = Dataset::open(&tmp.path().join("data")).unwrap();
        for (name, want) in &results {
            let row = ds.manifest.find(name).unwrap();
            let case = ds.load_case(row, false).unwrap();
            let got = pool.install(|| infer(&back, &case.volume, Tasks::available(&back)).unwrap());
            let bits = |v: &Option<Volume>| v.as_ref().unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&got.prob), bits(&want.prob), "{name}: probabilities differ after reload");
            assert_eq!(bits(&got.mask), bits(&want.mask), "{name}: mask differs after reload");
            let (gc, gp) = got.class.unwrap();
            let (wc, wp) = want.class.unwrap();
            assert_eq!(gc, wc);
            assert!(gp.iter().zip(&wp).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}: class probabilities differ");
            loaded_ok += 1;
        }
        trees.push(tree_bytes(tmp.path()));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let names_a: Vec<&String> = a.keys().collect();
    let names_b: Vec<&String> = b.keys().collect();
    assert_eq!(names_a, names_b, "runs wrote different files");
    for (name, bytes) in a {
        assert!(bytes == &b[name], "{name} differs between 1 and 4 threads");
    }
    format!(
        "{} files identical at 1 and 4 threads; {loaded_ok} reloaded predictions bit-identical",
        a.len()
    )
}

fn main() {
    let mut report = Report { failures: 0 };
    let start = Instant::now();
    // Keep panic output to the FAIL lines.
    std::panic::set_hook(Box::new(|_| {}));

    report.run(1, "Saab correctness", criterion_saab);
    report.run(3, "select_k and energy table", criterion_select_k);
    report.run(5, "boosted-tree monotonicity and split oracle", criterion_gbt);
    report.run(8, "overlap and classification metrics", criterion_metrics);

    println!("building phantom experiment ({TRAIN} train / {TEST} test, {} cores)", cores());
    let experiment = catch_unwind(build_experiment);
    match experiment {
        Ok(x) => {
            println!("experiment ready in {:.0}s", x.setup_secs);
            report.run(2, "energy guarantee", || criterion_energy(&x));
            report.run(4, "resolution chain and label conservation", || criterion_resolution(&x));
            let mut seg_model = None;
            report.run(6, "phantom segmentation", || {
                let out = criterion_segmentation(&x);
                let control = negative_control(&x, &out.model);
                seg_model = Some(out.model);
                format!("{}; {control}", out.detail)
            });
            let mut cls_model = None;
            report.run(7, "phantom classification", || {
                let (m, detail) = criterion_classification(&x);
                cls_model = Some(m);
                detail
            });
            report.run(10, "parameter census", || match (seg_model, cls_model) {
                (Some(s), Some(c)) => criterion_census(&x, s, c),
                _ => panic!("needs the trained segmentation and classification models"),
            });
        }
        Err(e) => {
            let why = e.downcast_ref::<String>().cloned().unwrap_or_default();
            println!("experiment failed: {why}");
            for (id, name) in [
                (2, "energy guarantee"),
                (4, "resolution chain and label conservation"),
                (6, "phantom segmentation"),
                (7, "phantom classification"),
                (10, "parameter census"),
            ] {
                report.run(id, name, || panic!("phantom experiment could not be built"));
            }
        }
    }
    report.run(9, "determinism and persistence", criterion_determinism);

    println!(
        "acceptance: {} of 10 criteria passed in {:.0}s",
        10 - report.failures,
        start.elapsed().as_secs_f64()
    );
    if report.failures > 0 {
        std::process::exit(1);
    }
}
