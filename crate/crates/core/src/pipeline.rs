//! End-to-end orchestration: dataset loading and splitting, the
//! preprocessing chain, and training/prediction for both architectures.
//!
//! `rf_fe` classifies each pixel from its local feature vector; `rf_wi`
//! maps one flattened gradient image to all mask pixels at once through a
//! multi-output forest. Both produce masks at the model's recorded target
//! size, so evaluation compares like with like.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::augment::{augment_dataset, AugmentConfig, SamplePair};
use crate::error::{Error, Result};
use crate::evaluate::measure;
use crate::features::{
    build_feature_matrix, flatten_whole_image, integral_image, pixel_features, sobel_magnitude,
    FeatureLayout, Sampling,
};
use crate::forest::{
    fit_forest, fit_forest_multi, predict, predict_multi, ForestParams, MultiOutputDataset,
    OutputMode, RandomForest,
};
use crate::imagecore::{
    load_image, load_mask, pad_mask_to, pad_to, resize_bilinear, resize_nearest, to_grayscale,
    GrayImage, LabelMask,
};
use crate::rng::stream;

const SPLIT_SALT: u64 = 0x50;
const WI_SALT: u64 = 0x57;

/// Default working resolution of the preprocessing chain.
pub const DEFAULT_TARGET: (usize, usize) = (512, 512);
/// Default whole-image downscale: 64x64 keeps the flattened feature
/// dimension at 4096 instead of the 262,144 a full-resolution model
/// would need.
pub const DEFAULT_WI_SIZE: (usize, usize) = (64, 64);
/// Default cap on whole-image training images.
pub const DEFAULT_WI_MAX_IMAGES: usize = 16;

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub seed: u64,
    pub ratio: f64,
}

/// Shuffle deterministically under `seed` and send the first
/// `round(ratio * n)` pairs to the train side.
pub fn split_dataset(pairs: Vec<SamplePair>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 2 samples to split, got {}",
            pairs.len()
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut pairs = pairs;
    let mut rng = stream(seed, &[SPLIT_SALT]);
    for i in (1..pairs.len()).rev() {
        let j = rng.random_range(0..=i);
        pairs.swap(i, j);
    }
    let n_train = (ratio * pairs.len() as f64).round() as usize;
    let test = pairs.split_off(n_train);
    Ok(DatasetSplit { train: pairs, test, seed, ratio })
}

/// Componentwise maximum of the dataset's image dimensions.
pub fn dataset_max_dims(pairs: &[SamplePair]) -> Result<(usize, usize)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(pairs.iter().fold((0, 0), |(w, h), p| (w.max(p.image.width), h.max(p.image.height))))
}

/// [`preprocess_chain`] with the pad target supplied by the caller, for
/// when the pad must come from a larger dataset than `pairs` (a test
/// side must reuse the geometry computed over the full dataset).
pub fn preprocess_with_pad(
    pairs: &[SamplePair],
    pad: (usize, usize),
    target: (usize, usize),
    augment_cfg: Option<&AugmentConfig>,
) -> Result<Vec<SamplePair>> {
    let padded: Vec<SamplePair> = pairs
        .iter()
        .map(|p| {
            Ok(SamplePair {
                image: pad_to(&p.image, pad.0, pad.1, 0.0)?,
                mask: pad_mask_to(&p.mask, pad.0, pad.1, 0)?,
                id: p.id.clone(),
                provenance: p.provenance.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let expanded = match augment_cfg {
        Some(cfg) => {
            cfg.validate()?;
            augment_dataset(&padded, cfg)
        }
        None => padded,
    };
    Ok(expanded
        .into_par_iter()
        .map(|p| SamplePair {
            image: resize_bilinear(&p.image, target.0, target.1),
            mask: resize_nearest(&p.mask, target.0, target.1),
            id: p.id,
            provenance: p.provenance,
        })
        .collect())
}

/// The fixed preprocessing order: images arrive grayscale from the
/// loader, are padded to the componentwise maximum of the dataset's
/// dimensions, optionally augmented, then resized to `target`.
pub fn preprocess_chain(
    pairs: &[SamplePair],
    target: (usize, usize),
    augment_cfg: Option<&AugmentConfig>,
) -> Result<Vec<SamplePair>> {
    let pad = dataset_max_dims(pairs)?;
    preprocess_with_pad(pairs, pad, target, augment_cfg)
}

/// Split and preprocess in one step. The default splits the original
/// images first and augments only the train side, which keeps every
/// derivative of a test image out of training; `augment_before_split`
/// restores the naive order for comparison runs and is leaky by design.
pub fn prepare_split(
    pairs: Vec<SamplePair>,
    ratio: f64,
    seed: u64,
    target: (usize, usize),
    augment_cfg: Option<&AugmentConfig>,
    augment_before_split: bool,
) -> Result<DatasetSplit> {
    if augment_before_split {
        let processed = preprocess_chain(&pairs, target, augment_cfg)?;
        return split_dataset(processed, ratio, seed);
    }
    let pad = dataset_max_dims(&pairs)?;
    let split = split_dataset(pairs, ratio, seed)?;
    Ok(DatasetSplit {
        train: preprocess_with_pad(&split.train, pad, target, augment_cfg)?,
        test: preprocess_with_pad(&split.test, pad, target, None)?,
        seed: split.seed,
        ratio: split.ratio,
    })
}

/// Train ids whose source image also appears (as a source) on the test
/// side. Empty means the split is leak-free.
pub fn audit_leak_freedom(train: &[SamplePair], test: &[SamplePair]) -> Vec<String> {
    let test_sources: HashSet<&str> =
        test.iter().map(|p| p.provenance.source_id(&p.id)).collect();
    train
        .iter()
        .filter(|p| test_sources.contains(p.provenance.source_id(&p.id)))
        .map(|p| p.id.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    RfFe,
    RfWi,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::RfFe => "rf_fe",
            Architecture::RfWi => "rf_wi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMetadata {
    pub wall_seconds: f64,
    pub peak_resident_bytes: u64,
    /// Feature rows (rf_fe) or training images (rf_wi) seen by the forest.
    pub n_rows: u64,
    pub n_images: u32,
}

/// A forest plus everything needed to reproduce its preprocessing at
/// prediction time.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub architecture: Architecture,
    pub forest: RandomForest,
    /// Working resolution; predictions are emitted at this size.
    pub target: (usize, usize),
    /// Feature window k (rf_fe); retained for rf_wi for the record.
    pub window: usize,
    pub layout_version: u32,
    /// Whole-image downscale; `None` for rf_fe.
    pub wi_size: Option<(usize, usize)>,
    pub metadata: TrainingMetadata,
}

fn uniform_dims(train: &[SamplePair]) -> Result<(usize, usize)> {
    let (w, h) = (train[0].image.width, train[0].image.height);
    for p in train {
        if (p.image.width, p.image.height) != (w, h) {
            return Err(Error::DimensionMismatch(format!(
                "training pair {} is {}x{}, expected the preprocessed size {}x{}",
                p.id, p.image.width, p.image.height, w, h
            )));
        }
    }
    Ok((w, h))
}

/// Pixel-wise architecture: feature rows from every training image feed
/// one single-output forest.
pub fn train_rf_fe(
    train: &[SamplePair],
    params: &ForestParams,
    sampling: Sampling,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let target = uniform_dims(train)?;
    let (built, wall, peak) = measure(|| -> Result<(RandomForest, u64)> {
        let matrix = build_feature_matrix(train, sampling, params.seed)?;
        let forest = fit_forest(&matrix, params)?;
        Ok((forest, matrix.n_rows as u64))
    });
    let (forest, n_rows) = built?;
    Ok(TrainedModel {
        architecture: Architecture::RfFe,
        forest,
        target,
        window: FeatureLayout::default().window,
        layout_version: LAYOUT_VERSION,
        wi_size: None,
        metadata: TrainingMetadata {
            wall_seconds: wall,
            peak_resident_bytes: peak,
            n_rows,
            n_images: train.len() as u32,
        },
    })
}

/// Classify every pixel of `img` at the model's target size.
pub fn predict_rf_fe(model: &TrainedModel, img: &GrayImage) -> Result<LabelMask> {
    if model.architecture != Architecture::RfFe {
        return Err(Error::ArchitectureMismatch {
            expected: "rf_fe".into(),
            found: model.architecture.as_str().into(),
        });
    }
    let (tw, th) = model.target;
    let resized = resize_bilinear(img, tw, th);
    let layout = FeatureLayout::new(model.window);
    if model.forest.n_cols != layout.total_columns() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} feature columns, layout provides {}",
            model.forest.n_cols,
            layout.total_columns()
        )));
    }
    let sob = sobel_magnitude(&resized);
    let ti = integral_image(&resized);
    let ts = sob.integral();
    let rows: Vec<Vec<u8>> = (0..th)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(tw);
            let mut feats = vec![0f32; layout.total_columns()];
            for x in 0..tw {
                let f = pixel_features(&resized, &sob, &ti, &ts, x, y, layout);
                for (dst, v) in feats.iter_mut().zip(&f) {
                    // the same f64 -> f32 narrowing the trainer applies
                    *dst = *v as f32;
                }
                row.push(predict(&model.forest, &feats));
            }
            row
        })
        .collect();
    let data: Vec<u8> = rows.into_iter().flatten().collect();
    Ok(LabelMask::from_vec(tw, th, model.forest.n_classes, data))
}

/// Whole-image architecture: each selected training image is downscaled
/// to `wi_size`, its flattened gradient image becomes one row, and its
/// flattened mask becomes that row's multi-output target.
pub fn train_rf_wi(
    train: &[SamplePair],
    params: &ForestParams,
    wi_size: Option<(usize, usize)>,
    max_images: Option<usize>,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let target = uniform_dims(train)?;
    let wi = wi_size.unwrap_or(DEFAULT_WI_SIZE);
    if wi.0 < 1 || wi.1 < 1 {
        return Err(Error::InvalidConfig(format!("wi_size {}x{} is degenerate", wi.0, wi.1)));
    }
    let selected: Vec<&SamplePair> = match max_images {
        Some(cap) if cap < train.len() => {
            if cap == 0 {
                return Err(Error::InvalidConfig("max_images must be at least 1".into()));
            }
            let mut rng = stream(params.seed, &[WI_SALT]);
            let mut idx: Vec<usize> = (0..train.len()).collect();
            for i in 0..cap {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            let mut keep = idx[..cap].to_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| &train[i]).collect()
        }
        _ => train.iter().collect(),
    };
    let n_outputs = wi.0 * wi.1;
    let (forest, wall, peak) = measure(|| -> Result<RandomForest> {
        let mut values = Vec::with_capacity(selected.len() * n_outputs);
        let mut targets = Vec::with_capacity(selected.len() * n_outputs);
        let mut n_classes = 2usize;
        for pair in &selected {
            let img = resize_bilinear(&pair.image, wi.0, wi.1);
            let mask = resize_nearest(&pair.mask, wi.0, wi.1);
            let sob = sobel_magnitude(&img);
            values.extend(flatten_whole_image(&sob).iter().map(|&v| v as f32));
            targets.extend(mask.data.iter().map(|&c| c as u16));
            n_classes = n_classes.max(mask.n_classes);
        }
        let data = MultiOutputDataset::new(n_outputs, values, n_outputs, n_classes, targets);
        fit_forest_multi(&data, params)
    });
    let forest = forest?;
    Ok(TrainedModel {
        architecture: Architecture::RfWi,
        forest,
        target,
        window: FeatureLayout::default().window,
        layout_version: LAYOUT_VERSION,
        wi_size: Some(wi),
        metadata: TrainingMetadata {
            wall_seconds: wall,
            peak_resident_bytes: peak,
            n_rows: selected.len() as u64,
            n_images: selected.len() as u32,
        },
    })
}

/// Predict at `wi_size`, then nearest-upscale to the model target size.
pub fn predict_rf_wi(model: &TrainedModel, img: &GrayImage) -> Result<LabelMask> {
    if model.architecture != Architecture::RfWi {
        return Err(Error::ArchitectureMismatch {
            expected: "rf_wi".into(),
            found: model.architecture.as_str().into(),
        });
    }
    let wi = model
        .wi_size
        .ok_or_else(|| Error::MalformedModel("rf_wi model lacks wi_size".into()))?;
    let small = resize_bilinear(img, wi.0, wi.1);
    let sob = sobel_magnitude(&small);
    let x: Vec<f32> = flatten_whole_image(&sob).iter().map(|&v| v as f32).collect();
    let small_mask = predict_multi(&model.forest, &x, wi.0, wi.1)?;
    Ok(resize_nearest(&small_mask, model.target.0, model.target.1))
}

/// Route to the architecture's predictor.
pub fn predict_mask(model: &TrainedModel, img: &GrayImage) -> Result<LabelMask> {
    match model.architecture {
        Architecture::RfFe => predict_rf_fe(model, img),
        Architecture::RfWi => predict_rf_wi(model, img),
    }
}

// ---------------------------------------------------------------------------
// Dataset directory layout: root/images/<id>.png + root/masks/<id>.png.
// ---------------------------------------------------------------------------

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn find_mask_path(masks_dir: &Path, image_path: &Path) -> Result<PathBuf> {
    let name = image_path.file_name().expect("listed files have names");
    let direct = masks_dir.join(name);
    if direct.is_file() {
        return Ok(direct);
    }
    let stem = image_path.file_stem().expect("listed files have stems");
    for ext in IMAGE_EXTENSIONS {
        let candidate = masks_dir.join(stem).with_extension(ext);
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::FileNotFound(direct))
}

/// Load every image/mask pair under `root`, matched by file stem and
/// sorted by id. Mask class counts are unified to the dataset maximum.
pub fn load_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::FileNotFound(images_dir));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::Io { path: images_dir.clone(), source: e })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pairs = Vec::with_capacity(files.len());
    for path in files {
        let mask_path = find_mask_path(&masks_dir, &path)?;
        let image = to_grayscale(&load_image(&path)?);
        let mask = load_mask(&mask_path, None)?;
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(Error::DimensionMismatch(format!(
                "{}: image {}x{} vs mask {}x{}",
                path.display(),
                image.width,
                image.height,
                mask.width,
                mask.height
            )));
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::UnsupportedFormat(format!("{}", path.display())))?
            .to_string();
        pairs.push(SamplePair::new(image, mask, id));
    }
    let n_classes = pairs.iter().map(|p| p.mask.n_classes).max().unwrap_or(2);
    for p in &mut pairs {
        p.mask.n_classes = n_classes;
    }
    Ok(pairs)
}

/// One `<id>\t<train|test>` line per pair, train side first.
pub fn write_split_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in &split.train {
        text.push_str(&format!("{}\ttrain\n", p.id));
    }
    for p in &split.test {
        text.push_str(&format!("{}\ttest\n", p.id));
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Parse a manifest back into (id, side) records.
pub fn read_split_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(side), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::InvalidConfig(format!(
                "manifest line {} is not 'id<TAB>side'",
                lineno + 1
            )));
        };
        if side != "train" && side != "test" {
            return Err(Error::InvalidConfig(format!(
                "manifest line {}: side must be train or test, got {side}",
                lineno + 1
            )));
        }
        out.push((id.to_string(), side.to_string()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model container: PFTM v1.
//
// Wraps the forest's own byte format with the preprocessing record and
// training metadata. All integers little-endian. Layout:
//   magic "PFTM", version u32, architecture u8 (0 rf_fe / 1 rf_wi),
//   target_w u32, target_h u32, window u32, layout_version u32,
//   wi_w u32, wi_h u32 (both 0 for rf_fe),
//   wall_seconds f64, peak_resident_bytes u64, n_rows u64, n_images u32,
//   forest_len u64, forest bytes.
// ---------------------------------------------------------------------------

const PFTM_MAGIC: &[u8; 4] = b"PFTM";
const PFTM_VERSION: u32 = 1;
const LAYOUT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedData);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PFTM_MAGIC);
        out.extend_from_slice(&PFTM_VERSION.to_le_bytes());
        out.push(match self.architecture {
            Architecture::RfFe => 0,
            Architecture::RfWi => 1,
        });
        out.extend_from_slice(&(self.target.0 as u32).to_le_bytes());
        out.extend_from_slice(&(self.target.1 as u32).to_le_bytes());
        out.extend_from_slice(&(self.window as u32).to_le_bytes());
        out.extend_from_slice(&self.layout_version.to_le_bytes());
        let wi = self.wi_size.unwrap_or((0, 0));
        out.extend_from_slice(&(wi.0 as u32).to_le_bytes());
        out.extend_from_slice(&(wi.1 as u32).to_le_bytes());
        out.extend_from_slice(&self.metadata.wall_seconds.to_le_bytes());
        out.extend_from_slice(&self.metadata.peak_resident_bytes.to_le_bytes());
        out.extend_from_slice(&self.metadata.n_rows.to_le_bytes());
        out.extend_from_slice(&self.metadata.n_images.to_le_bytes());
        let forest = self.forest.to_bytes();
        out.extend_from_slice(&(forest.len() as u64).to_le_bytes());
        out.extend_from_slice(&forest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PFTM_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != PFTM_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let architecture = match r.u8()? {
            0 => Architecture::RfFe,
            1 => Architecture::RfWi,
            other => {
                return Err(Error::MalformedModel(format!("unknown architecture tag {other}")))
            }
        };
        let target = (r.u32()? as usize, r.u32()? as usize);
        let window = r.u32()? as usize;
        let layout_version = r.u32()?;
        let wi = (r.u32()? as usize, r.u32()? as usize);
        let wi_size = if wi == (0, 0) { None } else { Some(wi) };
        let metadata = TrainingMetadata {
            wall_seconds: r.f64()?,
            peak_resident_bytes: r.u64()?,
            n_rows: r.u64()?,
            n_images: r.u32()?,
        };
        let forest_len = r.u64()? as usize;
        let forest = RandomForest::from_bytes(r.take(forest_len)?)?;
        if r.pos != bytes.len() {
            return Err(Error::MalformedModel("trailing bytes after forest".into()));
        }
        let model = Self {
            architecture,
            forest,
            target,
            window,
            layout_version,
            wi_size,
            metadata,
        };
        model.check_consistency()?;
        Ok(model)
    }

    fn check_consistency(&self) -> Result<()> {
        match (self.architecture, &self.forest.output_mode, self.wi_size) {
            (Architecture::RfFe, OutputMode::Single, None) => {
                let expected = FeatureLayout::new(self.window).total_columns();
                if self.forest.n_cols != expected {
                    return Err(Error::MalformedModel(format!(
                        "rf_fe forest has {} columns, window {} implies {}",
                        self.forest.n_cols, self.window, expected
                    )));
                }
            }
            (Architecture::RfWi, OutputMode::Multi { n_outputs }, Some(wi)) => {
                if wi.0 * wi.1 != *n_outputs {
                    return Err(Error::MalformedModel(format!(
                        "rf_wi size {}x{} does not match {} outputs",
                        wi.0, wi.1, n_outputs
                    )));
                }
            }
            _ => {
                return Err(Error::MalformedModel(
                    "architecture tag does not match forest output mode".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let bytes =
            std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{confusion, metrics};
    use crate::synth::{generate, write_dataset, SynthKind, SynthSpec};

    fn tiny_blobs(n: usize, seed: u64) -> Vec<SamplePair> {
        generate(&SynthSpec::new(SynthKind::Blobs, n, 32, 32, seed)).unwrap()
    }

    fn fg_dice(pred: &LabelMask, gt: &LabelMask) -> f64 {
        let counts = confusion(pred, gt, 2).unwrap();
        metrics(&counts)[1].dice.unwrap()
    }

    #[test]
    fn split_sizes_follow_rounding() {
        let split = split_dataset(tiny_blobs(10, 1), 0.8, 5).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (8, 2));
        let split = split_dataset(tiny_blobs(34, 1), 0.8, 5).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (27, 7));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_dataset(tiny_blobs(12, 3), 0.75, 9).unwrap();
        let b = split_dataset(tiny_blobs(12, 3), 0.75, 9).unwrap();
        let ids = |v: &[SamplePair]| v.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        let train: HashSet<_> = ids(&a.train).into_iter().collect();
        for id in ids(&a.test) {
            assert!(!train.contains(&id));
        }
        let c = split_dataset(tiny_blobs(12, 3), 0.75, 10).unwrap();
        assert_ne!(ids(&a.train), ids(&c.train));
    }

    #[test]
    fn split_rejects_tiny_datasets() {
        assert!(matches!(
            split_dataset(tiny_blobs(1, 0), 0.8, 0),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn preprocess_pads_to_componentwise_max() {
        let mk = |w, h, id: &str| {
            SamplePair::new(
                GrayImage::from_fn(w, h, |x, y| ((x + y) % 7) as f64 / 7.0),
                LabelMask::new(w, h, 2),
                id,
            )
        };
        let pairs = vec![mk(100, 80, "a"), mk(90, 120, "b")];
        let out = preprocess_chain(&pairs, (100, 120), None).unwrap();
        for p in &out {
            assert_eq!((p.image.width, p.image.height), (100, 120));
        }
        // original content sits top-left, fill elsewhere
        assert_eq!(out[0].image.get(99, 79), pairs[0].image.get(99, 79));
        assert_eq!(out[0].image.get(0, 100), 0.0);
    }

    #[test]
    fn preprocess_identity_when_presized() {
        let pairs = tiny_blobs(3, 8);
        let out = preprocess_chain(&pairs, (32, 32), None).unwrap();
        for (a, b) in out.iter().zip(&pairs) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn preprocess_augmentation_multiplies_count() {
        let pairs = tiny_blobs(4, 2);
        let cfg = AugmentConfig { factor: 10, seed: 1, ..AugmentConfig::default() };
        let out = preprocess_chain(&pairs, (32, 32), Some(&cfg)).unwrap();
        assert_eq!(out.len(), 40);
    }

    #[test]
    fn prepare_split_keeps_test_unaugmented_and_leak_free() {
        let cfg = AugmentConfig { factor: 4, seed: 7, ..AugmentConfig::default() };
        let split =
            prepare_split(tiny_blobs(6, 4), 0.5, 11, (32, 32), Some(&cfg), false).unwrap();
        assert_eq!(split.train.len(), 3 * 4);
        assert_eq!(split.test.len(), 3);
        assert!(audit_leak_freedom(&split.train, &split.test).is_empty());
        // planting a derivative of a test image must trip the audit
        let mut leaky = split.train.clone();
        let mut plant = split.test[0].clone();
        plant.provenance = crate::augment::Provenance::Augmented {
            source: split.test[0].id.clone(),
            variant: 1,
        };
        plant.id = format!("{}_aug01", plant.id);
        leaky.push(plant);
        assert_eq!(audit_leak_freedom(&leaky, &split.test).len(), 1);
    }

    #[test]
    fn rf_fe_memorizes_tiny_training_set() {
        let train = tiny_blobs(2, 21);
        let params = ForestParams { n_trees: 25, seed: 3, ..ForestParams::default() };
        let model = train_rf_fe(&train, &params, Sampling::Balanced(800)).unwrap();
        assert_eq!(model.architecture, Architecture::RfFe);
        assert_eq!(model.target, (32, 32));
        for pair in &train {
            let pred = predict_rf_fe(&model, &pair.image).unwrap();
            assert!(fg_dice(&pred, &pair.mask) >= 0.9);
        }
        assert!(model.metadata.n_rows > 0);
        assert!(model.metadata.wall_seconds > 0.0);
    }

    #[test]
    fn rf_fe_training_is_deterministic() {
        let train = tiny_blobs(2, 5);
        let params = ForestParams { n_trees: 8, seed: 9, ..ForestParams::default() };
        let a = train_rf_fe(&train, &params, Sampling::Balanced(200)).unwrap();
        let b = train_rf_fe(&train, &params, Sampling::Balanced(200)).unwrap();
        assert_eq!(a.forest, b.forest);
        assert_eq!(a.forest.to_bytes(), b.forest.to_bytes());
    }

    #[test]
    fn rf_fe_single_class_training_predicts_that_class() {
        let img = GrayImage::from_fn(32, 32, |x, y| ((x * y) % 11) as f64 / 11.0);
        let mask = LabelMask::new(32, 32, 2);
        let train = vec![SamplePair::new(img, mask, "flat")];
        let params = ForestParams { n_trees: 5, seed: 1, ..ForestParams::default() };
        let model = train_rf_fe(&train, &params, Sampling::PerImageCount(100)).unwrap();
        let probe = GrayImage::from_fn(32, 32, |_, _| 0.5);
        let pred = predict_rf_fe(&model, &probe).unwrap();
        assert!(pred.data.iter().all(|&c| c == 0));
    }

    #[test]
    fn rf_fe_feature_rows_count_with_sampling_all() {
        let train = tiny_blobs(2, 13);
        let params = ForestParams { n_trees: 2, max_depth: 4, seed: 1, ..ForestParams::default() };
        let model = train_rf_fe(&train, &params, Sampling::All).unwrap();
        assert_eq!(model.metadata.n_rows, 2 * 32 * 32);
    }

    #[test]
    fn rf_wi_single_image_replays_its_mask() {
        let train = tiny_blobs(1, 17);
        let params = ForestParams { n_trees: 7, seed: 2, ..ForestParams::default() };
        let model = train_rf_wi(&train, &params, Some((16, 16)), None).unwrap();
        assert_eq!(model.forest.n_cols, 256);
        let expected = resize_nearest(&resize_nearest(&train[0].mask, 16, 16), 32, 32);
        let probe = GrayImage::from_fn(32, 32, |x, _| x as f64 / 32.0);
        let pred = predict_rf_wi(&model, &probe).unwrap();
        assert_eq!(pred.data, expected.data);
    }

    #[test]
    fn rf_wi_caps_training_images_with_seeded_draw() {
        let train = tiny_blobs(9, 23);
        let params = ForestParams { n_trees: 3, seed: 6, ..ForestParams::default() };
        let a = train_rf_wi(&train, &params, Some((8, 8)), Some(4)).unwrap();
        assert_eq!(a.metadata.n_images, 4);
        let b = train_rf_wi(&train, &params, Some((8, 8)), Some(4)).unwrap();
        assert_eq!(a.forest, b.forest);
        let uncapped = train_rf_wi(&train, &params, Some((8, 8)), None).unwrap();
        assert_eq!(uncapped.metadata.n_images, 9);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let train = tiny_blobs(1, 30);
        let params = ForestParams { n_trees: 2, max_depth: 3, seed: 4, ..ForestParams::default() };
        let fe = train_rf_fe(&train, &params, Sampling::PerImageCount(50)).unwrap();
        let wi = train_rf_wi(&train, &params, Some((8, 8)), None).unwrap();
        assert!(matches!(
            predict_rf_wi(&fe, &train[0].image),
            Err(Error::ArchitectureMismatch { .. })
        ));
        assert!(matches!(
            predict_rf_fe(&wi, &train[0].image),
            Err(Error::ArchitectureMismatch { .. })
        ));
        assert_eq!(predict_mask(&fe, &train[0].image).unwrap().width, 32);
        assert_eq!(predict_mask(&wi, &train[0].image).unwrap().width, 32);
    }

    #[test]
    fn model_container_round_trips() {
        let train = tiny_blobs(2, 19);
        let params = ForestParams { n_trees: 4, seed: 8, ..ForestParams::default() };
        for model in [
            train_rf_fe(&train, &params, Sampling::Balanced(100)).unwrap(),
            train_rf_wi(&train, &params, Some((8, 8)), None).unwrap(),
        ] {
            let bytes = model.to_bytes();
            let back = TrainedModel::from_bytes(&bytes).unwrap();
            assert_eq!(back.architecture, model.architecture);
            assert_eq!(back.target, model.target);
            assert_eq!(back.window, model.window);
            assert_eq!(back.wi_size, model.wi_size);
            assert_eq!(back.forest, model.forest);
            assert_eq!(back.metadata, model.metadata);
            assert_eq!(back.to_bytes(), bytes);
            let pred_a = predict_mask(&model, &train[0].image).unwrap();
            let pred_b = predict_mask(&back, &train[0].image).unwrap();
            assert_eq!(pred_a.data, pred_b.data);
        }
    }

    #[test]
    fn model_container_rejects_corruption() {
        let train = tiny_blobs(1, 25);
        let params = ForestParams { n_trees: 2, max_depth: 3, seed: 1, ..ForestParams::default() };
        let model = train_rf_fe(&train, &params, Sampling::PerImageCount(60)).unwrap();
        let bytes = model.to_bytes();
        assert!(matches!(TrainedModel::from_bytes(&bytes[..10]), Err(Error::TruncatedData)));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(TrainedModel::from_bytes(&bad_magic), Err(Error::BadMagic)));
        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        assert!(matches!(
            TrainedModel::from_bytes(&bad_version),
            Err(Error::UnsupportedVersion(99))
        ));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(TrainedModel::from_bytes(&trailing), Err(Error::MalformedModel(_))));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(SynthKind::Blobs, 4, 32, 32, 77);
        let written = write_dataset(&spec, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        for (a, b) in loaded.iter().zip(&written) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask.data, b.mask.data);
        }
        assert!(matches!(
            load_dataset(&dir.path().join("nope")),
            Err(Error::FileNotFound(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = split_dataset(tiny_blobs(5, 2), 0.8, 1).unwrap();
        let path = dir.path().join("split.tsv");
        write_split_manifest(&split, &path).unwrap();
        let rows = read_split_manifest(&path).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows.iter().filter(|(_, s)| s == "train").count(), 4);
        assert_eq!(rows.iter().filter(|(_, s)| s == "test").count(), 1);
        std::fs::write(&path, "a\tvalidation\n").unwrap();
        assert!(read_split_manifest(&path).is_err());
    }
}
