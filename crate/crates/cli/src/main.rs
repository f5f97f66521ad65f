use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use echohop::census::Census;
use echohop::cls::HopMask;
use echohop::config::RunConfig;
use echohop::io::container::{load_model, save_model, ModelContainer};
use echohop::io::manifest::{parse_manifest, Split};
use echohop::io::volume_file::read_volume;
use echohop::io::{csv_text, write_atomic};
use echohop::pipeline::{self, Dataset, Tasks};
use echohop::seg::SegAudit;
use echohop::{Error, Result};

/// Feed-forward echocardiography segmentation and LVEF classification.
#[derive(Parser, Debug)]
#[command(name = "echohop", version)]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Training cases per class.
        #[arg(long)]
        per_class: usize,
        /// Validation cases per class.
        #[arg(long, default_value_t = 0)]
        val_per_class: usize,
        /// Test cases per class; defaults to a third of --per-class.
        #[arg(long)]
        test_per_class: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the feature encoder on the training split.
    FitEncoder {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory to create.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for report CSVs (default `<out>/reports`).
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Train the segmentation decoder and add it to a model.
    TrainSeg {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Train the classification decoder and add it to a model.
    TrainCls {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Hop subset of the stored classifier, e.g. `1234` or `34`.
        #[arg(long)]
        hops: Option<HopMask>,
        /// Also train and score one classifier per hop subset.
        #[arg(long)]
        ablate_hops: bool,
    },
    /// Predict masks and classes.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// A volume file, a directory of volumes, or a dataset directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of `seg,cls`; defaults to what the model supports.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        /// Split to run when --input is a dataset directory.
        #[arg(long, default_value = "TEST")]
        split: String,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Directory with `<name>.mask.glvol` files and/or `predictions.csv`.
        #[arg(long)]
        pred: PathBuf,
        /// Directory with ground-truth `<name>.mask.glvol` files, or a dataset directory.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "TEST")]
        split: String,
        /// Time indices of the two phases in predicted masks with more than two frames.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 6])]
        mask_frames: Vec<usize>,
    },
    /// Write per-hop eigenvalue spectra.
    EnergyReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the parameter census of a model.
    Census {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file (or `--seed` alone), then flag overrides, then validation.
fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => {
            let seed = args
                .seed
                .ok_or_else(|| Error::Config("a seed is required: pass --config or --seed".into()))?;
            RunConfig::with_seed(seed)
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {name} path: pass --{name} or set paths.{name}")))
}

fn reports_dir(flag: Option<PathBuf>, cfg: &RunConfig, model: &Path) -> PathBuf {
    flag.or_else(|| cfg.paths.output.clone())
        .unwrap_or_else(|| model.join("reports"))
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| Error::Config(format!("unknown split `{s}` (TRAIN, VAL or TEST)")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn with_config_echo(mut model: ModelContainer, cfg: &RunConfig) -> Result<ModelContainer> {
    model.config_echo = Some(cfg.to_toml()?);
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            per_class,
            val_per_class,
            test_per_class,
            cfg,
        } => {
            let cfg = load_config(&cfg)?;
            let test = test_per_class.unwrap_or(per_class.div_ceil(3));
            if per_class == 0 {
                return Err(Error::Config("--per-class must be at least 1".into()));
            }
            let splits: Vec<(Split, usize)> = [(Split::Train, per_class), (Split::Val, val_per_class), (Split::Test, test)]
                .into_iter()
                .filter(|&(_, n)| n > 0)
                .map(|(s, n)| (s, 3 * n))
                .collect();
            let m = pipeline::write_phantom_dataset(&out, &cfg.synth, &splits)?;
            log::info!("wrote {} phantom cases to {}", m.rows.len(), out.display());
        }
        Command::FitEncoder {
            cfg,
            data,
            out,
            reports,
        } => {
            let cfg = load_config(&cfg)?;
            let data = required(data, &cfg.paths.data, "data")?;
            let out = required(out, &cfg.paths.model, "out")?;
            let reports = reports_dir(reports, &cfg, &out);
            let ds = Dataset::open(&data)?;
            let cases = ds.load_split(Split::Train, false)?;
            let encoder = pipeline::fit_encoder_stage(&cases, &cfg)?;
            log::info!("encoder channels {:?}", encoder.per_hop_channel_counts());
            for (name, text) in pipeline::energy_csvs(&encoder)? {
                write_text(&reports.join(name), &text)?;
            }
            let model = with_config_echo(ModelContainer::new(cfg.preprocess.clone(), encoder), &cfg)?;
            save_model(&model, &out)?;
            log::info!("saved model to {}", out.display());
        }
        Command::TrainSeg {
            cfg,
            data,
            model,
            reports,
        } => {
            let cfg = load_config(&cfg)?;
            let data = required(data, &cfg.paths.data, "data")?;
            let dir = required(model, &cfg.paths.model, "model")?;
            let reports = reports_dir(reports, &cfg, &dir);
            let mut model = load_model(&dir)?;
            check_preprocess(&model, &cfg)?;
            let ds = Dataset::open(&data)?;
            let cases = ds.load_split(Split::Train, true)?;
            let (seg, audit) = pipeline::train_seg_stage(&model.encoder, &cases, &cfg)?;
            write_text(
                &reports.join("seg_audit.csv"),
                &csv_text(&SegAudit::CSV_HEADER, &audit.csv_rows())?,
            )?;
            model.seg = Some(seg);
            save_model(&with_config_echo(model, &cfg)?, &dir)?;
            log::info!("saved model to {}", dir.display());
        }
        Command::TrainCls {
            cfg,
            data,
            model,
            reports,
            hops,
            ablate_hops,
        } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(h) = hops {
                cfg.cls.hops = h;
            }
            let data = required(data, &cfg.paths.data, "data")?;
            let dir = required(model, &cfg.paths.model, "model")?;
            let reports = reports_dir(reports, &cfg, &dir);
            let mut model = load_model(&dir)?;
            check_preprocess(&model, &cfg)?;
            let ds = Dataset::open(&data)?;
            let train = ds.load_split(Split::Train, false)?;
            let labels = pipeline::case_labels(&train)?;
            let descs = pipeline::descriptors_stage(&model.encoder, &train, &cfg.preprocess)?;
            let cls = pipeline::train_cls_stage(&model.encoder, &descs, &labels, &cfg.cls)?;
            write_text(&reports.join("augmentation.csv"), &cls.augmentation.csv()?)?;
            if ablate_hops {
                let held_out = if ds.rows(Split::Val).is_empty() { Split::Test } else { Split::Val };
                log::info!("scoring hop subsets on the {} split", held_out.as_str());
                let eval = ds.load_split(held_out, false)?;
                let eval_labels = pipeline::case_labels(&eval)?;
                let eval_descs = pipeline::descriptors_stage(&model.encoder, &eval, &cfg.preprocess)?;
                let rows = pipeline::ablate_hops(
                    &model.encoder,
                    (&descs, &labels),
                    (&eval_descs, &eval_labels),
                    &cfg.cls,
                )?;
                write_text(&reports.join("hop_ablation.csv"), &pipeline::ablation_csv(&rows)?)?;
            }
            model.cls = Some(cls);
            save_model(&with_config_echo(model, &cfg)?, &dir)?;
            log::info!("saved model to {}", dir.display());
        }
        Command::Infer {
            model,
            input,
            out,
            tasks,
            split,
        } => {
            let model = load_model(&model)?;
            let tasks = parse_tasks(tasks.as_deref(), &model)?;
            let (inputs, truth) = infer_inputs(&input, &split)?;
            let mut results = Vec::with_capacity(inputs.len());
            for (name, path) in inputs {
                let vol = read_volume(&path)?;
                log::info!("inferring {name}");
                results.push((name, pipeline::infer(&model, &vol, tasks)?));
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            pipeline::write_inference(&out, &results, truth.as_ref())?;
            log::info!("wrote {} predictions to {}", results.len(), out.display());
        }
        Command::Eval {
            pred,
            gt,
            manifest,
            out,
            split,
            mask_frames,
        } => {
            let frames: [usize; 2] = mask_frames
                .try_into()
                .map_err(|_| Error::Config("--mask-frames takes exactly two indices".into()))?;
            let split = parse_split(&split)?;
            let manifest = parse_manifest(&manifest)?;
            let names: Vec<String> = manifest.split(split).map(|r| r.file_name.clone()).collect();
            let gt_masks = if gt.join(pipeline::MASK_DIR).is_dir() {
                gt.join(pipeline::MASK_DIR)
            } else {
                gt
            };
            let mut any = false;
            let seg_names: Vec<String> = names
                .iter()
                .filter(|n| pred.join(pipeline::mask_file(n)).exists())
                .cloned()
                .collect();
            if !seg_names.is_empty() {
                if seg_names.len() < names.len() {
                    log::warn!(
                        "{} of {} {} cases have predicted masks",
                        seg_names.len(),
                        names.len(),
                        split.as_str()
                    );
                }
                let scores = pipeline::evaluate_masks(&pred, &gt_masks, &seg_names, frames)?;
                write_text(&out.join("seg_metrics.csv"), &pipeline::seg_metrics_csv(&scores)?)?;
                any = true;
            }
            let preds = pred.join(pipeline::PREDICTIONS_FILE);
            if preds.exists() {
                let text = std::fs::read_to_string(&preds).map_err(|e| Error::io(&preds, e))?;
                let report = pipeline::evaluate_predictions(&text, &manifest)?;
                write_text(&out.join("cls_metrics.csv"), &report.metrics_csv()?)?;
                write_text(&out.join("confusion.csv"), &report.confusion_csv()?)?;
                any = true;
            }
            if !any {
                return Err(Error::invalid(format!(
                    "{} holds neither predicted masks for the {} split nor {}",
                    pred.display(),
                    split.as_str(),
                    pipeline::PREDICTIONS_FILE
                )));
            }
        }
        Command::EnergyReport { model, out } => {
            let model = load_model(&model)?;
            for (name, text) in pipeline::energy_csvs(&model.encoder)? {
                write_text(&out.join(name), &text)?;
            }
        }
        Command::Census { model, out } => {
            let model = load_model(&model)?;
            let c = Census::of(&model);
            log::info!(
                "model parameters {}, reference network {}, ratio {:.1}",
                c.total,
                c.reference_cnn,
                c.reduction()
            );
            write_text(&out.join("census.csv"), &csv_text(&["component", "parameters"], &c.csv_rows())?)?;
        }
    }
    Ok(())
}

fn check_preprocess(model: &ModelContainer, cfg: &RunConfig) -> Result<()> {
    if model.preprocess != cfg.preprocess {
        return Err(Error::Config(format!(
            "preprocess settings differ from those the encoder was fitted with ({:?})",
            model.preprocess
        )));
    }
    Ok(())
}

fn parse_tasks(tasks: Option<&[String]>, model: &ModelContainer) -> Result<Tasks> {
    let Some(list) = tasks else {
        return Ok(Tasks::available(model));
    };
    let mut t = Tasks { seg: false, cls: false };
    for s in list {
        match s.trim() {
            "seg" => t.seg = true,
            "cls" => t.cls = true,
            other => return Err(Error::Config(format!("unknown task `{other}` (seg or cls)"))),
        }
    }
    Ok(t)
}

type Inputs = (Vec<(String, PathBuf)>, Option<echohop::io::manifest::Manifest>);

fn infer_inputs(input: &Path, split: &str) -> Result<Inputs> {
    if input.join(pipeline::MANIFEST_FILE).exists() {
        let ds = Dataset::open(input)?;
        let split = parse_split(split)?;
        let list = ds
            .rows(split)
            .into_iter()
            .map(|r| {
                let name = r.file_name.clone();
                let path = input.join(pipeline::VOLUME_DIR).join(pipeline::volume_file(&name));
                (name, path)
            })
            .collect();
        return Ok((list, Some(ds.manifest)));
    }
    if input.is_dir() {
        let mut list = Vec::new();
        for entry in std::fs::read_dir(input).map_err(|e| Error::io(input, e))? {
            let path = entry.map_err(|e| Error::io(input, e))?.path();
            let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
                continue;
            };
            if let Some(name) = file.strip_suffix(".glvol") {
                if !name.ends_with(".mask") && !name.ends_with(".prob") {
                    list.push((name.to_string(), path.clone()));
                }
            }
        }
        list.sort();
        if list.is_empty() {
            return Err(Error::invalid(format!("no .glvol volumes in {}", input.display())));
        }
        return Ok((list, None));
    }
    let name = input
        .file_name()
        .and_then(|f| f.to_str())
        .map(|f| f.trim_end_matches(".glvol").to_string())
        .ok_or_else(|| Error::invalid(format!("cannot name input {}", input.display())))?;
    Ok((vec![(name, input.to_path_buf())], None))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error[internal]: cannot start thread pool: {e}");
        return ExitCode::from(5);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {e}", cat.as_str());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
