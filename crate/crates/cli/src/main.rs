//! `rfseg`: one binary with `synth`, `train`, `predict`, `eval`, and
//! `bench` subcommands.
//!
//! Global flags `--seed`, `--threads`, and `--config` apply everywhere.
//! A config file holds one `key=value` per line (`#` comments allowed)
//! and supplies defaults for the common knobs; a command-line flag beats
//! the config file, which beats the built-in default. Unknown keys are
//! rejected.
//!
//! Exit codes: 0 on success, 1 for runtime failures, 2 for usage errors.
//! Diagnostics go to stderr; stdout carries only result summaries.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use rfseg_core::augment::AugmentConfig;
use rfseg_core::evaluate::{
    confusion, emit_boxplot_csv, emit_report_csv, emit_scatter_csv, evaluate_model, measure,
    parse_report_csv, pooled_metrics, resource_report_csv, overlay_prediction, EvalReport,
    PhaseStats,
};
use rfseg_core::features::Sampling;
use rfseg_core::forest::ForestParams;
use rfseg_core::imagecore::{
    load_image, load_mask, resize_bilinear, resize_nearest, save_mask, save_rgb, to_grayscale,
    LabelMask,
};
use rfseg_core::pipeline::{
    audit_leak_freedom, dataset_max_dims, load_dataset, predict_mask, prepare_split,
    preprocess_with_pad, train_rf_fe, train_rf_wi, write_split_manifest, DatasetSplit,
    TrainedModel, DEFAULT_WI_MAX_IMAGES, DEFAULT_WI_SIZE,
};
use rfseg_core::synth::{write_dataset, SynthKind, SynthSpec};

#[derive(Parser)]
#[command(
    name = "rfseg",
    version,
    about = "Random-forest image segmentation: synthetic data, training, prediction, evaluation"
)]
struct Cli {
    /// Base RNG seed; every derived stream is keyed from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core); results do not depend on this
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key=value file supplying defaults for common flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the images/ + masks/ layout
    Synth {
        /// Shape family to draw
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Number of image/mask pairs
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Gaussian noise sigma added to images
        #[arg(long)]
        noise: Option<f64>,
        /// Dataset root to create
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset, preprocess, train a forest, write model + manifest
    Train {
        /// Dataset root containing images/ and masks/
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        arch: ArchArg,
        /// Where to write the model file
        #[arg(long)]
        model_out: PathBuf,
        #[command(flatten)]
        knobs: TrainKnobs,
        /// Split manifest path (default: <model-out>.split.tsv)
        #[arg(long)]
        manifest_out: Option<PathBuf>,
        /// Resource CSV path (default: <model-out>.resources.csv)
        #[arg(long)]
        resources_out: Option<PathBuf>,
    },
    /// Predict masks for an image file or a directory of images
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Image file or directory
        #[arg(long)]
        input: PathBuf,
        /// Output directory for predicted masks
        #[arg(long)]
        out: PathBuf,
        /// Also write <id>_overlay.png with the prediction tinted red
        #[arg(long)]
        overlay: bool,
    },
    /// Evaluate a model or a directory of external masks on the test split
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Split manifest written by train
        #[arg(long)]
        manifest: PathBuf,
        /// Model file (mutually exclusive with --pred-dir)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory of externally produced masks named <id>.png
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Metrics CSV to write
        #[arg(long)]
        report: PathBuf,
        /// Optional long-format CSV for boxplots
        #[arg(long)]
        boxplot: Option<PathBuf>,
        /// Another report CSV to pair with per image
        #[arg(long)]
        scatter: Option<PathBuf>,
        /// Where to write the scatter pairing (required with --scatter)
        #[arg(long)]
        scatter_out: Option<PathBuf>,
        /// Also print pixel-pooled metrics (sums counts over images first)
        #[arg(long)]
        pooled: bool,
    },
    /// Train + predict each architecture under resource sampling
    Bench {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated architectures, e.g. fe,wi
        #[arg(long)]
        archs: Option<String>,
        /// Output directory for resources.csv and per-arch reports
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        knobs: TrainKnobs,
    },
}

/// Training knobs shared by `train` and `bench`. All optional so the
/// config file can fill them; defaults applied after the merge.
#[derive(clap::Args)]
struct TrainKnobs {
    /// Train fraction of the split
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    /// Candidate features per split (default floor(sqrt(n_cols)))
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long)]
    min_split: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Disable bootstrap resampling
    #[arg(long)]
    no_bootstrap: bool,
    /// all | per-image:N | balanced:N
    #[arg(long)]
    sampling: Option<String>,
    /// Dataset multiplication factor; 1 disables augmentation
    #[arg(long)]
    augment_factor: Option<usize>,
    /// Augment the whole dataset before splitting (leaky; for comparison)
    #[arg(long)]
    augment_before_split: bool,
    /// Working resolution, WxH or a single side length
    #[arg(long)]
    target: Option<String>,
    /// Whole-image downscale, WxH or a single side length
    #[arg(long)]
    wi_size: Option<String>,
    /// Whole-image training-image cap; 0 lifts the cap
    #[arg(long)]
    max_images: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Blobs,
    Vessels,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Fe,
    Wi,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<rfseg_core::Error> for CliError {
    fn from(e: rfseg_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = Result<T, CliError>;

const CONFIG_KEYS: [&str; 15] = [
    "seed",
    "threads",
    "ratio",
    "trees",
    "max-depth",
    "mtry",
    "min-split",
    "min-leaf",
    "bootstrap",
    "sampling",
    "augment-factor",
    "target",
    "wi-size",
    "max-images",
    "noise",
];

#[derive(Default)]
struct ConfigMap {
    values: HashMap<String, String>,
}

impl ConfigMap {
    fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!(
                    "config line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(usage(format!(
                    "config line {}: unknown key {key:?} (known: {})",
                    lineno + 1,
                    CONFIG_KEYS.join(", ")
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key}: {e}"))),
        }
    }
}

/// flag > config file > default.
fn pick<T: FromStr>(flag: Option<T>, cfg: &ConfigMap, key: &str, default: T) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    Ok(flag.or(cfg.get(key)?).unwrap_or(default))
}

fn parse_dims(text: &str, what: &str) -> CliResult<(usize, usize)> {
    let parse_side = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| usage(format!("{what}: cannot parse {s:?} as a dimension")))
    };
    match text.split_once(['x', 'X']) {
        Some((w, h)) => Ok((parse_side(w)?, parse_side(h)?)),
        None => {
            let side = parse_side(text)?;
            Ok((side, side))
        }
    }
}

fn parse_sampling(text: &str) -> CliResult<Sampling> {
    if text == "all" {
        return Ok(Sampling::All);
    }
    let parsed = text.split_once(':').and_then(|(kind, n)| {
        let n = n.parse::<usize>().ok()?;
        match kind {
            "per-image" => Some(Sampling::PerImageCount(n)),
            "balanced" => Some(Sampling::Balanced(n)),
            _ => None,
        }
    });
    parsed.ok_or_else(|| {
        usage(format!("--sampling: expected all, per-image:N or balanced:N, got {text:?}"))
    })
}

/// Effective training configuration after the flag/config/default merge.
struct TrainSettings {
    ratio: f64,
    params: ForestParams,
    sampling: Sampling,
    augment: Option<AugmentConfig>,
    augment_before_split: bool,
    target: (usize, usize),
    wi_size: (usize, usize),
    max_images: Option<usize>,
}

impl TrainSettings {
    fn resolve(knobs: &TrainKnobs, cfg: &ConfigMap, seed: u64) -> CliResult<Self> {
        let ratio = pick(knobs.ratio, cfg, "ratio", 0.8)?;
        let bootstrap = if knobs.no_bootstrap {
            false
        } else {
            pick(None, cfg, "bootstrap", true)?
        };
        let params = ForestParams {
            n_trees: pick(knobs.trees, cfg, "trees", 100)?,
            max_depth: pick(knobs.max_depth, cfg, "max-depth", 40)?,
            mtry: knobs.mtry.map_or_else(|| cfg.get("mtry"), |v| Ok(Some(v)))?,
            bootstrap,
            min_samples_split: pick(knobs.min_split, cfg, "min-split", 2)?,
            min_samples_leaf: pick(knobs.min_leaf, cfg, "min-leaf", 1)?,
            seed,
        };
        let sampling_text: String =
            pick(knobs.sampling.clone(), cfg, "sampling", "balanced:4096".into())?;
        let sampling = parse_sampling(&sampling_text)?;
        let factor = pick(knobs.augment_factor, cfg, "augment-factor", 10)?;
        if factor < 1 {
            return Err(usage("--augment-factor must be at least 1"));
        }
        let augment = (factor > 1)
            .then(|| AugmentConfig { seed, factor, ..AugmentConfig::default() });
        let target_text: String = pick(knobs.target.clone(), cfg, "target", "512x512".into())?;
        let wi_text: String = pick(
            knobs.wi_size.clone(),
            cfg,
            "wi-size",
            format!("{}x{}", DEFAULT_WI_SIZE.0, DEFAULT_WI_SIZE.1),
        )?;
        let max_images = match pick(knobs.max_images, cfg, "max-images", DEFAULT_WI_MAX_IMAGES)? {
            0 => None,
            n => Some(n),
        };
        Ok(Self {
            ratio,
            params,
            sampling,
            augment,
            augment_before_split: knobs.augment_before_split,
            target: parse_dims(&target_text, "--target")?,
            wi_size: parse_dims(&wi_text, "--wi-size")?,
            max_images,
        })
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} {} is not a directory", path.display())));
    }
    Ok(())
}

fn create_parent_dirs(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

fn cmd_synth(
    kind: KindArg,
    n: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
    noise: Option<f64>,
    out: &Path,
    cfg: &ConfigMap,
    seed: u64,
) -> CliResult<()> {
    let kind = match kind {
        KindArg::Blobs => SynthKind::Blobs,
        KindArg::Vessels => SynthKind::Vessels,
    };
    let mut spec = SynthSpec::new(
        kind,
        n.unwrap_or(40),
        width.unwrap_or(128),
        height.unwrap_or(128),
        seed,
    );
    spec.noise_sigma = pick(noise, cfg, "noise", spec.noise_sigma)?;
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let pairs = write_dataset(&spec, out)?;
    log::info!("wrote {} {} pairs under {}", pairs.len(), kind.as_str(), out.display());
    Ok(())
}

fn split_and_train(
    data: &Path,
    arch: ArchArg,
    settings: &TrainSettings,
) -> CliResult<(DatasetSplit, TrainedModel, f64, u64)> {
    let pairs = load_dataset(data)?;
    log::info!("loaded {} pairs from {}", pairs.len(), data.display());
    let (split, pre_wall, pre_peak) = measure(|| {
        prepare_split(
            pairs,
            settings.ratio,
            settings.params.seed,
            settings.target,
            settings.augment.as_ref(),
            settings.augment_before_split,
        )
    });
    let split = split?;
    let leaks = audit_leak_freedom(&split.train, &split.test);
    if !leaks.is_empty() {
        log::warn!(
            "{} train samples derive from test images (expected only with --augment-before-split)",
            leaks.len()
        );
    }
    log::info!(
        "split: {} train / {} test at {}x{}",
        split.train.len(),
        split.test.len(),
        settings.target.0,
        settings.target.1
    );
    let model = match arch {
        ArchArg::Fe => train_rf_fe(&split.train, &settings.params, settings.sampling)?,
        ArchArg::Wi => train_rf_wi(
            &split.train,
            &settings.params,
            Some(settings.wi_size),
            settings.max_images,
        )?,
    };
    log::info!(
        "trained {} on {} rows in {:.1}s",
        model.architecture.as_str(),
        model.metadata.n_rows,
        model.metadata.wall_seconds
    );
    Ok((split, model, pre_wall, pre_peak))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    arch: ArchArg,
    model_out: &Path,
    knobs: &TrainKnobs,
    manifest_out: Option<&Path>,
    resources_out: Option<&Path>,
    cfg: &ConfigMap,
    seed: u64,
) -> CliResult<()> {
    require_dir(data, "dataset")?;
    let settings = TrainSettings::resolve(knobs, cfg, seed)?;
    let (split, model, pre_wall, pre_peak) = split_and_train(data, arch, &settings)?;

    create_parent_dirs(model_out)?;
    model.save(model_out)?;
    let manifest_path = manifest_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| suffixed(model_out, ".split.tsv"));
    write_split_manifest(&split, &manifest_path)?;
    let resources_path = resources_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| suffixed(model_out, ".resources.csv"));
    let label = model.architecture.as_str().to_string();
    resource_report_csv(
        &[
            PhaseStats {
                model: label.clone(),
                phase: "preprocess".into(),
                wall_seconds: pre_wall,
                peak_resident_bytes: pre_peak,
            },
            PhaseStats {
                model: label,
                phase: "train".into(),
                wall_seconds: model.metadata.wall_seconds,
                peak_resident_bytes: model.metadata.peak_resident_bytes,
            },
        ],
        &resources_path,
    )?;
    log::info!(
        "wrote {}, {} and {}",
        model_out.display(),
        manifest_path.display(),
        resources_path.display()
    );
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_predict(model_path: &Path, input: &Path, out: &Path, overlay: bool) -> CliResult<()> {
    if !input.exists() {
        return Err(usage(format!("input {} does not exist", input.display())));
    }
    let model = TrainedModel::load(model_path)?;
    let inputs = if input.is_dir() {
        let files = list_images(input)?;
        if files.is_empty() {
            return Err(usage(format!("no images found in {}", input.display())));
        }
        files
    } else {
        vec![input.to_path_buf()]
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let results: Vec<(PathBuf, Option<PathBuf>)> = inputs
        .par_iter()
        .map(|path| -> Result<_, rfseg_core::Error> {
            let img = to_grayscale(&load_image(path)?);
            let pred = predict_mask(&model, &img)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let mask_path = out.join(format!("{stem}.png"));
            save_mask(&pred, &mask_path)?;
            let overlay_path = if overlay {
                let base = resize_bilinear(&img, model.target.0, model.target.1);
                let rgb = overlay_prediction(&base, &pred, None)?;
                let p = out.join(format!("{stem}_overlay.png"));
                save_rgb(&rgb, &p)?;
                Some(p)
            } else {
                None
            };
            Ok((mask_path, overlay_path))
        })
        .collect::<Result<_, _>>()?;
    log::info!("wrote {} predicted masks to {}", results.len(), out.display());
    Ok(())
}

fn test_pairs_from_manifest(
    data: &Path,
    manifest: &Path,
) -> CliResult<(Vec<rfseg_core::augment::SamplePair>, (usize, usize))> {
    let all = load_dataset(data)?;
    let pad = dataset_max_dims(&all)?;
    let manifest_rows = rfseg_core::pipeline::read_split_manifest(manifest)?;
    let test_ids: HashSet<&str> = manifest_rows
        .iter()
        .filter(|(_, side)| side == "test")
        .map(|(id, _)| id.as_str())
        .collect();
    if test_ids.is_empty() {
        return Err(usage(format!("{} lists no test images", manifest.display())));
    }
    let test: Vec<_> = all.into_iter().filter(|p| test_ids.contains(p.id.as_str())).collect();
    if test.len() != test_ids.len() {
        let present: HashSet<&str> = test.iter().map(|p| p.id.as_str()).collect();
        let missing: Vec<&str> =
            test_ids.iter().copied().filter(|id| !present.contains(id)).collect();
        return Err(CliError::Runtime(anyhow::anyhow!(
            "dataset is missing {} manifest test ids: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok((test, pad))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    data: &Path,
    manifest: &Path,
    model_path: Option<&Path>,
    pred_dir: Option<&Path>,
    report_path: &Path,
    boxplot: Option<&Path>,
    scatter: Option<&Path>,
    scatter_out: Option<&Path>,
    pooled: bool,
) -> CliResult<()> {
    require_dir(data, "dataset")?;
    if !manifest.is_file() {
        return Err(usage(format!("manifest {} is not a file", manifest.display())));
    }
    let (test, pad) = test_pairs_from_manifest(data, manifest)?;

    let (label, test, predictions) = match (model_path, pred_dir) {
        (Some(model_path), None) => {
            let model = TrainedModel::load(model_path)?;
            let test = preprocess_with_pad(&test, pad, model.target, None)?;
            let preds: Vec<LabelMask> = test
                .par_iter()
                .map(|p| predict_mask(&model, &p.image))
                .collect::<rfseg_core::Result<_>>()?;
            (model.architecture.as_str().to_string(), test, preds)
        }
        (None, Some(dir)) => {
            require_dir(dir, "--pred-dir")?;
            let missing: Vec<&str> = test
                .iter()
                .filter(|p| find_pred_mask(dir, &p.id).is_none())
                .map(|p| p.id.as_str())
                .collect();
            if missing.len() == test.len() {
                return Err(rfseg_core::Error::NoCommonImages.into());
            }
            if !missing.is_empty() {
                return Err(CliError::Runtime(anyhow::anyhow!(
                    "{} missing predicted masks for {} test images: {}",
                    dir.display(),
                    missing.len(),
                    missing.join(", ")
                )));
            }
            let preds: Vec<LabelMask> = test
                .par_iter()
                .map(|p| {
                    let path = find_pred_mask(dir, &p.id).expect("checked above");
                    let mask = load_mask(&path, None)?;
                    Ok(if (mask.width, mask.height) == (p.mask.width, p.mask.height) {
                        mask
                    } else {
                        resize_nearest(&mask, p.mask.width, p.mask.height)
                    })
                })
                .collect::<rfseg_core::Result<_>>()?;
            let label = dir.file_name().and_then(|s| s.to_str()).unwrap_or("external");
            (label.to_string(), test, preds)
        }
        _ => return Err(usage("exactly one of --model or --pred-dir is required")),
    };

    let n_classes = test
        .iter()
        .map(|p| p.mask.n_classes)
        .chain(predictions.iter().map(|m| m.n_classes))
        .max()
        .unwrap_or(2);
    let by_id: HashMap<&str, &LabelMask> =
        test.iter().map(|p| p.id.as_str()).zip(predictions.iter()).collect();
    let report = evaluate_model(
        label.clone(),
        |pair| Ok(by_id[pair.id.as_str()].clone()),
        &test,
        n_classes,
    )?;

    create_parent_dirs(report_path)?;
    emit_report_csv(&report, report_path)?;
    log::info!("wrote {}", report_path.display());
    if let Some(path) = boxplot {
        emit_boxplot_csv(std::slice::from_ref(&report), path)?;
        log::info!("wrote {}", path.display());
    }
    match (scatter, scatter_out) {
        (Some(other), Some(out)) => {
            let other_report = parse_report_csv(other, "other")?;
            emit_scatter_csv(&report, &other_report, out)?;
            log::info!("wrote {}", out.display());
        }
        (Some(_), None) | (None, Some(_)) => {
            return Err(usage("--scatter and --scatter-out must be given together"));
        }
        (None, None) => {}
    }

    print_headline(&report);
    if pooled {
        let counts = test
            .iter()
            .zip(&predictions)
            .map(|(pair, pred)| confusion(pred, &pair.mask, n_classes))
            .collect::<rfseg_core::Result<Vec<_>>>()?;
        let scores = pooled_metrics(&counts)?;
        let macro_acc = mean_of(scores.iter().filter_map(|s| s.accuracy));
        let fg = &scores[1.min(n_classes - 1)];
        println!(
            "model={label} pooled macro_accuracy={} dice={} iou={} sensitivity={}",
            fmt_opt(macro_acc),
            fmt_opt(fg.dice),
            fmt_opt(fg.iou),
            fmt_opt(fg.sensitivity),
        );
    }
    Ok(())
}

fn find_pred_mask(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"))
}

fn print_headline(report: &EvalReport) {
    println!(
        "model={} images={} macro_accuracy={} dice={} iou={} sensitivity={}",
        report.model,
        report.images.len(),
        fmt_opt(report.headline.macro_accuracy),
        fmt_opt(report.headline.dice),
        fmt_opt(report.headline.iou),
        fmt_opt(report.headline.sensitivity),
    );
}

fn cmd_bench(
    data: &Path,
    archs: Option<&str>,
    out_dir: &Path,
    knobs: &TrainKnobs,
    cfg: &ConfigMap,
    seed: u64,
) -> CliResult<()> {
    require_dir(data, "dataset")?;
    let archs: Vec<ArchArg> = archs
        .unwrap_or("fe,wi")
        .split(',')
        .map(|a| match a.trim() {
            "fe" => Ok(ArchArg::Fe),
            "wi" => Ok(ArchArg::Wi),
            other => Err(usage(format!("--archs: unknown architecture {other:?}"))),
        })
        .collect::<CliResult<_>>()?;
    let settings = TrainSettings::resolve(knobs, cfg, seed)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut rows = Vec::new();
    for arch in archs {
        let (split, model, pre_wall, pre_peak) = split_and_train(data, arch, &settings)?;
        let label = model.architecture.as_str().to_string();
        rows.push(PhaseStats {
            model: label.clone(),
            phase: "preprocess".into(),
            wall_seconds: pre_wall,
            peak_resident_bytes: pre_peak,
        });
        rows.push(PhaseStats {
            model: label.clone(),
            phase: "train".into(),
            wall_seconds: model.metadata.wall_seconds,
            peak_resident_bytes: model.metadata.peak_resident_bytes,
        });
        let (preds, pred_wall, pred_peak) = measure(|| {
            split
                .test
                .par_iter()
                .map(|p| predict_mask(&model, &p.image))
                .collect::<rfseg_core::Result<Vec<LabelMask>>>()
        });
        let preds = preds?;
        rows.push(PhaseStats {
            model: label.clone(),
            phase: "predict".into(),
            wall_seconds: pred_wall,
            peak_resident_bytes: pred_peak,
        });
        let n_classes = model.forest.n_classes.max(
            split.test.iter().map(|p| p.mask.n_classes).max().unwrap_or(2),
        );
        let by_id: HashMap<&str, &LabelMask> =
            split.test.iter().map(|p| p.id.as_str()).zip(preds.iter()).collect();
        let report = evaluate_model(
            label.clone(),
            |pair| Ok(by_id[pair.id.as_str()].clone()),
            &split.test,
            n_classes,
        )?;
        emit_report_csv(&report, &out_dir.join(format!("report_{label}.csv")))?;
        print_headline(&report);
    }
    resource_report_csv(&rows, &out_dir.join("resources.csv"))?;
    log::info!("wrote {}", out_dir.join("resources.csv").display());
    Ok(())
}

fn run() -> CliResult<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    let seed: u64 = pick(cli.seed, &cfg, "seed", 0)?;
    let threads: usize = pick(cli.threads, &cfg, "threads", 0)?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth { kind, n, width, height, noise, out } => {
            cmd_synth(*kind, *n, *width, *height, *noise, out, &cfg, seed)
        }
        Command::Train { data, arch, model_out, knobs, manifest_out, resources_out } => cmd_train(
            data,
            *arch,
            model_out,
            knobs,
            manifest_out.as_deref(),
            resources_out.as_deref(),
            &cfg,
            seed,
        ),
        Command::Predict { model, input, out, overlay } => cmd_predict(model, input, out, *overlay),
        Command::Eval {
            data,
            manifest,
            model,
            pred_dir,
            report,
            boxplot,
            scatter,
            scatter_out,
            pooled,
        } => cmd_eval(
            data,
            manifest,
            model.as_deref(),
            pred_dir.as_deref(),
            report,
            boxplot.as_deref(),
            scatter.as_deref(),
            scatter_out.as_deref(),
            *pooled,
        ),
        Command::Bench { data, archs, out_dir, knobs } => {
            cmd_bench(data, archs.as_deref(), out_dir, knobs, &cfg, seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
