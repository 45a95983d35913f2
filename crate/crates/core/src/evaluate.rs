//! Segmentation scoring: one-vs-rest confusion counts, the four headline
//! metrics (accuracy, Dice, IoU, sensitivity), per-image aggregation, CSV
//! report emission, prediction overlays, and resource benchmarking.
//!
//! Metrics with a zero denominator are undefined rather than forced to 0 or
//! 1; undefined values carry `None` and are excluded from aggregates.

use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::augment::SamplePair;
use crate::error::{Error, Result};
use crate::imagecore::{GrayImage, LabelMask, RgbImage};

/// One-vs-rest pixel counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub n_classes: usize,
    pub total: u64,
    pub per_class: Vec<ClassCounts>,
}

/// Per-class metric values; `None` marks an undefined (0/0) metric.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScores {
    pub accuracy: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub sensitivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub image_id: String,
    pub classes: Vec<ClassScores>,
}

impl ImageScores {
    /// Mean of the per-class one-vs-rest accuracies.
    pub fn macro_accuracy(&self) -> Option<f64> {
        mean(self.classes.iter().filter_map(|c| c.accuracy))
    }
}

/// Distribution summary of the defined per-image values of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassAggregates {
    pub accuracy: Option<Summary>,
    pub dice: Option<Summary>,
    pub iou: Option<Summary>,
    pub sensitivity: Option<Summary>,
}

/// Headline numbers: macro accuracy plus foreground-class (class 1)
/// Dice/IoU/sensitivity, each a mean over test images.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Headline {
    pub macro_accuracy: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub sensitivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub n_classes: usize,
    pub images: Vec<ImageScores>,
    pub aggregates: Vec<ClassAggregates>,
    pub headline: Headline,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Linear-interpolation quantile (R type 7) of a sorted slice.
fn quantile_sorted(xs: &[f64], p: f64) -> f64 {
    debug_assert!(!xs.is_empty());
    let h = (xs.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(xs.len() - 1);
    let frac = h - lo as f64;
    xs[lo] + frac * (xs[hi] - xs[lo])
}

fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(Summary {
        mean: xs.iter().sum::<f64>() / xs.len() as f64,
        median: quantile_sorted(&xs, 0.5),
        q1: quantile_sorted(&xs, 0.25),
        q3: quantile_sorted(&xs, 0.75),
        min: xs[0],
        max: xs[xs.len() - 1],
        n: xs.len(),
    })
}

/// One-vs-rest confusion counts of a prediction against ground truth.
pub fn confusion(pred: &LabelMask, gt: &LabelMask, n_classes: usize) -> Result<ConfusionCounts> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    assert!(
        pred.data.iter().all(|&c| (c as usize) < n_classes)
            && gt.data.iter().all(|&c| (c as usize) < n_classes),
        "class id out of range"
    );
    // K x K matrix indexed [gt][pred], then folded to one-vs-rest counts
    let mut matrix = vec![0u64; n_classes * n_classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        matrix[g as usize * n_classes + p as usize] += 1;
    }
    let total = (pred.width * pred.height) as u64;
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let tp = matrix[c * n_classes + c];
        let fneg: u64 = (0..n_classes).filter(|&j| j != c).map(|j| matrix[c * n_classes + j]).sum();
        let fpos: u64 = (0..n_classes).filter(|&j| j != c).map(|j| matrix[j * n_classes + c]).sum();
        per_class.push(ClassCounts {
            true_pos: tp,
            false_pos: fpos,
            false_neg: fneg,
            true_neg: total - tp - fpos - fneg,
        });
    }
    Ok(ConfusionCounts { n_classes, total, per_class })
}

/// accuracy = (TP+TN)/N, dice = 2TP/(2TP+FP+FN), iou = TP/(TP+FP+FN),
/// sensitivity = TP/(TP+FN); zero denominators yield `None`.
pub fn metrics(counts: &ConfusionCounts) -> Vec<ClassScores> {
    counts
        .per_class
        .iter()
        .map(|c| {
            let ratio = |num: u64, den: u64| {
                if den == 0 {
                    None
                } else {
                    Some(num as f64 / den as f64)
                }
            };
            ClassScores {
                accuracy: ratio(c.true_pos + c.true_neg, counts.total),
                dice: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg),
                iou: ratio(c.true_pos, c.true_pos + c.false_pos + c.false_neg),
                sensitivity: ratio(c.true_pos, c.true_pos + c.false_neg),
            }
        })
        .collect()
}

/// Pixel-pooled alternative to per-image aggregation: sums the confusion
/// counts over all images first, then computes one score set per class.
pub fn pooled_metrics(per_image: &[ConfusionCounts]) -> Result<Vec<ClassScores>> {
    let Some(first) = per_image.first() else {
        return Err(Error::EmptyTestSet);
    };
    let n_classes = first.n_classes;
    let mut sum = ConfusionCounts {
        n_classes,
        total: 0,
        per_class: vec![ClassCounts::default(); n_classes],
    };
    for counts in per_image {
        if counts.n_classes != n_classes {
            return Err(Error::DimensionMismatch(format!(
                "cannot pool {} classes with {}",
                counts.n_classes, n_classes
            )));
        }
        sum.total += counts.total;
        for (acc, c) in sum.per_class.iter_mut().zip(&counts.per_class) {
            acc.true_pos += c.true_pos;
            acc.false_pos += c.false_pos;
            acc.false_neg += c.false_neg;
            acc.true_neg += c.true_neg;
        }
    }
    Ok(metrics(&sum))
}

impl EvalReport {
    /// Assemble a report from per-image scores: sorts by image id, then
    /// computes per-class aggregates and the headline row.
    pub fn from_images(
        model: impl Into<String>,
        n_classes: usize,
        mut images: Vec<ImageScores>,
    ) -> Self {
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let collect = |pick: &dyn Fn(&ClassScores) -> Option<f64>, class: usize| -> Vec<f64> {
            images.iter().filter_map(|img| pick(&img.classes[class])).collect()
        };
        let aggregates = (0..n_classes)
            .map(|class| ClassAggregates {
                accuracy: summarize(&collect(&|c| c.accuracy, class)),
                dice: summarize(&collect(&|c| c.dice, class)),
                iou: summarize(&collect(&|c| c.iou, class)),
                sensitivity: summarize(&collect(&|c| c.sensitivity, class)),
            })
            .collect();
        let fg = 1usize.min(n_classes - 1);
        let headline = Headline {
            macro_accuracy: mean(images.iter().filter_map(|i| i.macro_accuracy())),
            dice: mean(images.iter().filter_map(|i| i.classes[fg].dice)),
            iou: mean(images.iter().filter_map(|i| i.classes[fg].iou)),
            sensitivity: mean(images.iter().filter_map(|i| i.classes[fg].sensitivity)),
        };
        Self { model: model.into(), n_classes, images, aggregates, headline }
    }
}

/// Score a predictor on every test pair. The predictor must emit a mask
/// with the pair's dimensions.
pub fn evaluate_model<F>(
    model: impl Into<String>,
    predict_fn: F,
    test: &[SamplePair],
    n_classes: usize,
) -> Result<EvalReport>
where
    F: Fn(&SamplePair) -> Result<LabelMask> + Sync,
{
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let images: Vec<ImageScores> = test
        .par_iter()
        .map(|pair| {
            let pred = predict_fn(pair)?;
            let counts = confusion(&pred, &pair.mask, n_classes)?;
            Ok(ImageScores { image_id: pair.id.clone(), classes: metrics(&counts) })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_images(model, n_classes, images))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Write `image_id,class,accuracy,dice,iou,sensitivity` rows followed by
/// `aggregate_*` rows. UTF-8, dot decimal, 6 decimal places; undefined
/// values are empty fields.
pub fn emit_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("image_id,class,accuracy,dice,iou,sensitivity\n");
    for img in &report.images {
        for (class, s) in img.classes.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                img.image_id,
                class,
                fmt_opt(s.accuracy),
                fmt_opt(s.dice),
                fmt_opt(s.iou),
                fmt_opt(s.sensitivity),
            ));
        }
    }
    for (class, agg) in report.aggregates.iter().enumerate() {
        let stats: [(&str, &dyn Fn(&Summary) -> f64); 6] = [
            ("aggregate_mean", &|s| s.mean),
            ("aggregate_median", &|s| s.median),
            ("aggregate_q1", &|s| s.q1),
            ("aggregate_q3", &|s| s.q3),
            ("aggregate_min", &|s| s.min),
            ("aggregate_max", &|s| s.max),
        ];
        for (label, pick) in stats {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                label,
                class,
                fmt_opt(agg.accuracy.as_ref().map(pick)),
                fmt_opt(agg.dice.as_ref().map(pick)),
                fmt_opt(agg.iou.as_ref().map(pick)),
                fmt_opt(agg.sensitivity.as_ref().map(pick)),
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Parse a CSV produced by [`emit_report_csv`] back into a report
/// (aggregate rows are skipped and recomputed).
pub fn parse_report_csv(path: &Path, model: impl Into<String>) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut images: Vec<ImageScores> = Vec::new();
    let mut n_classes = 0usize;
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() || line.starts_with("aggregate_") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::InvalidConfig(format!("report line {}: bad field count", i + 1)));
        }
        let id = fields[0].to_string();
        let class: usize = fields[1]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("report line {}: bad class", i + 1)))?;
        n_classes = n_classes.max(class + 1);
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::InvalidConfig(format!("bad number: {s}")))
            }
        };
        let scores = ClassScores {
            accuracy: parse_opt(fields[2])?,
            dice: parse_opt(fields[3])?,
            iou: parse_opt(fields[4])?,
            sensitivity: parse_opt(fields[5])?,
        };
        match images.iter_mut().find(|img| img.image_id == id) {
            Some(img) => {
                if img.classes.len() != class {
                    return Err(Error::InvalidConfig(format!(
                        "report line {}: class rows out of order",
                        i + 1
                    )));
                }
                img.classes.push(scores);
            }
            None => images.push(ImageScores { image_id: id, classes: vec![scores] }),
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok(EvalReport::from_images(model, n_classes, images))
}

/// Long-format CSV (`model,metric,class,image_id,value`) with one row per
/// defined per-image metric value, ready for boxplot tooling.
pub fn emit_boxplot_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("no reports to emit".into()));
    }
    let mut out = String::from("model,metric,class,image_id,value\n");
    for report in reports {
        for img in &report.images {
            for (class, s) in img.classes.iter().enumerate() {
                for (metric, v) in [
                    ("accuracy", s.accuracy),
                    ("dice", s.dice),
                    ("iou", s.iou),
                    ("sensitivity", s.sensitivity),
                ] {
                    if let Some(v) = v {
                        out.push_str(&format!(
                            "{},{},{},{},{:.6}\n",
                            report.model, metric, class, img.image_id, v
                        ));
                    }
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Per-image values scattered for two models: macro accuracy plus
/// foreground Dice/IoU/sensitivity (`metric,image_id,value_a,value_b`).
/// Only images present in both reports are paired.
pub fn emit_scatter_csv(a: &EvalReport, b: &EvalReport, path: &Path) -> Result<()> {
    let mut common: Vec<&ImageScores> = a
        .images
        .iter()
        .filter(|img| b.images.iter().any(|other| other.image_id == img.image_id))
        .collect();
    common.sort_by(|x, y| x.image_id.cmp(&y.image_id));
    if common.is_empty() {
        return Err(Error::NoCommonImages);
    }
    let fg_a = 1usize.min(a.n_classes - 1);
    let fg_b = 1usize.min(b.n_classes - 1);
    let mut out = String::from("metric,image_id,value_a,value_b\n");
    for img_a in common {
        let img_b = b.images.iter().find(|i| i.image_id == img_a.image_id).unwrap();
        let rows = [
            ("accuracy", img_a.macro_accuracy(), img_b.macro_accuracy()),
            ("dice", img_a.classes[fg_a].dice, img_b.classes[fg_b].dice),
            ("iou", img_a.classes[fg_a].iou, img_b.classes[fg_b].iou),
            (
                "sensitivity",
                img_a.classes[fg_a].sensitivity,
                img_b.classes[fg_b].sensitivity,
            ),
        ];
        for (metric, va, vb) in rows {
            if let (Some(va), Some(vb)) = (va, vb) {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6}\n",
                    metric, img_a.image_id, va, vb
                ));
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Render the prediction over the image: non-background prediction tinted
/// red at 50% alpha, ground-truth foreground contour drawn in green.
pub fn overlay_prediction(
    img: &GrayImage,
    pred: &LabelMask,
    gt: Option<&LabelMask>,
) -> Result<RgbImage> {
    if (img.width, img.height) != (pred.width, pred.height) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs prediction {}x{}",
            img.width, img.height, pred.width, pred.height
        )));
    }
    if let Some(gt) = gt {
        if (gt.width, gt.height) != (img.width, img.height) {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs ground truth {}x{}",
                img.width, img.height, gt.width, gt.height
            )));
        }
    }
    let (w, h) = (img.width, img.height);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y);
            let mut px = [v, v, v];
            if pred.get(x, y) != 0 {
                px = [0.5 * v + 0.5, 0.5 * v, 0.5 * v];
            }
            if let Some(gt) = gt {
                let here = gt.get(x, y);
                if here != 0 {
                    let boundary = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(
                        |&(dx, dy)| {
                            let nx = x as i64 + dx;
                            let ny = y as i64 + dy;
                            nx < 0
                                || ny < 0
                                || nx >= w as i64
                                || ny >= h as i64
                                || gt.get(nx as usize, ny as usize) != here
                        },
                    );
                    if boundary {
                        px = [0.0, 1.0, 0.0];
                    }
                }
            }
            data.push(px);
        }
    }
    Ok(RgbImage { width: w, height: h, data })
}

#[cfg(target_os = "linux")]
fn resident_bytes() -> u64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmRSS:") {
            let kb: u64 = rest
                .trim()
                .trim_end_matches("kB")
                .trim()
                .parse()
                .unwrap_or(0);
            return kb * 1024;
        }
    }
    0
}

#[cfg(not(target_os = "linux"))]
fn resident_bytes() -> u64 {
    0
}

/// Background sampler polling resident-set size at ~100 Hz; `stop` returns
/// the peak observed, in bytes.
pub struct ResourceSampler {
    stop: Arc<AtomicBool>,
    peak: Arc<AtomicU64>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl ResourceSampler {
    pub fn start() -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let peak = Arc::new(AtomicU64::new(resident_bytes()));
        let stop2 = Arc::clone(&stop);
        let peak2 = Arc::clone(&peak);
        let handle = std::thread::spawn(move || {
            while !stop2.load(Ordering::Relaxed) {
                peak2.fetch_max(resident_bytes(), Ordering::Relaxed);
                std::thread::sleep(std::time::Duration::from_millis(10));
            }
            peak2.fetch_max(resident_bytes(), Ordering::Relaxed);
        });
        Self { stop, peak, handle: Some(handle) }
    }

    pub fn stop(mut self) -> u64 {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        self.peak.load(Ordering::Relaxed)
    }
}

impl Drop for ResourceSampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Resource usage of one pipeline phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStats {
    pub model: String,
    pub phase: String,
    pub wall_seconds: f64,
    pub peak_resident_bytes: u64,
}

/// Run `f` under the sampler, returning its output with wall time and peak
/// resident memory.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, f64, u64) {
    let sampler = ResourceSampler::start();
    let start = Instant::now();
    let out = f();
    let wall = start.elapsed().as_secs_f64();
    let peak = sampler.stop();
    (out, wall, peak)
}

/// `model,phase,wall_seconds,peak_resident_bytes` CSV.
pub fn resource_report_csv(rows: &[PhaseStats], path: &Path) -> Result<()> {
    let mut out = String::from("model,phase,wall_seconds,peak_resident_bytes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.model, r.phase, r.wall_seconds, r.peak_resident_bytes
        ));
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn mask_from(bits: &[u8], w: usize, h: usize) -> LabelMask {
        LabelMask::from_vec(w, h, 2, bits.to_vec())
    }

    fn random_mask(w: usize, h: usize, k: usize, salt: u64) -> LabelMask {
        let mut rng = stream(500, &[salt]);
        LabelMask::from_vec(
            w,
            h,
            k,
            (0..w * h).map(|_| rng.random_range(0..k) as u8).collect(),
        )
    }

    #[test]
    fn confusion_basics() {
        let gt = mask_from(&[1, 1, 0, 0], 2, 2);
        let same = confusion(&gt, &gt, 2).unwrap();
        for c in &same.per_class {
            assert_eq!(c.false_pos, 0);
            assert_eq!(c.false_neg, 0);
        }

        let pred = mask_from(&[0, 0, 0, 0], 2, 2);
        let counts = confusion(&pred, &gt, 2).unwrap();
        let fg = counts.per_class[1];
        assert_eq!(
            (fg.true_pos, fg.false_neg, fg.false_pos, fg.true_neg),
            (0, 2, 0, 2)
        );

        let small = mask_from(&[0], 1, 1);
        assert!(matches!(
            confusion(&small, &gt, 2),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn confusion_matches_naive_oracle() {
        for salt in 0..6u64 {
            let k = 2 + (salt % 2) as usize;
            let pred = random_mask(16, 16, k, salt * 2);
            let gt = random_mask(16, 16, k, salt * 2 + 1);
            let counts = confusion(&pred, &gt, k).unwrap();
            for c in 0..k as u8 {
                let mut want = ClassCounts::default();
                for (&p, &g) in pred.data.iter().zip(&gt.data) {
                    match (g == c, p == c) {
                        (true, true) => want.true_pos += 1,
                        (true, false) => want.false_neg += 1,
                        (false, true) => want.false_pos += 1,
                        (false, false) => want.true_neg += 1,
                    }
                }
                assert_eq!(counts.per_class[c as usize], want);
                let cc = counts.per_class[c as usize];
                assert_eq!(
                    cc.true_pos + cc.false_pos + cc.false_neg + cc.true_neg,
                    counts.total
                );
            }
        }
    }

    #[test]
    fn pooled_metrics_sum_counts_before_dividing() {
        let gt_a = mask_from(&[1, 1, 0, 0], 2, 2);
        let pred_a = mask_from(&[1, 0, 0, 0], 2, 2);
        let gt_b = mask_from(&[1, 1, 1, 1], 2, 2);
        let pred_b = mask_from(&[1, 1, 1, 1], 2, 2);
        let counts = [
            confusion(&pred_a, &gt_a, 2).unwrap(),
            confusion(&pred_b, &gt_b, 2).unwrap(),
        ];
        let pooled = pooled_metrics(&counts).unwrap();
        // foreground over both images: TP=5, FN=1, FP=0
        assert_eq!(pooled[1].dice, Some(10.0 / 11.0));
        assert_eq!(pooled[1].sensitivity, Some(5.0 / 6.0));
        // differs from the mean of per-image dice ((2/3 + 1) / 2)
        let per_image = [
            metrics(&counts[0])[1].dice.unwrap(),
            metrics(&counts[1])[1].dice.unwrap(),
        ];
        let mean_dice = (per_image[0] + per_image[1]) / 2.0;
        assert!((pooled[1].dice.unwrap() - mean_dice).abs() > 1e-3);
        assert!(pooled_metrics(&[]).is_err());
    }

    #[test]
    fn metric_formulas() {
        let gt = mask_from(&[1, 1, 0, 0], 2, 2);
        let perfect = metrics(&confusion(&gt, &gt, 2).unwrap());
        for s in &perfect {
            assert_eq!(s.accuracy, Some(1.0));
            assert_eq!(s.dice, Some(1.0));
            assert_eq!(s.iou, Some(1.0));
            assert_eq!(s.sensitivity, Some(1.0));
        }

        // disjoint, both non-empty
        let pred = mask_from(&[0, 0, 1, 1], 2, 2);
        let s = metrics(&confusion(&pred, &gt, 2).unwrap());
        assert_eq!(s[1].dice, Some(0.0));
        assert_eq!(s[1].iou, Some(0.0));
        assert_eq!(s[1].sensitivity, Some(0.0));

        // hand-built counts: TP=3 FP=1 FN=1 TN=11
        let counts = ConfusionCounts {
            n_classes: 2,
            total: 16,
            per_class: vec![
                ClassCounts { true_pos: 11, false_pos: 1, false_neg: 1, true_neg: 3 },
                ClassCounts { true_pos: 3, false_pos: 1, false_neg: 1, true_neg: 11 },
            ],
        };
        let s = metrics(&counts);
        assert!((s[1].dice.unwrap() - 0.75).abs() < 1e-12);
        assert!((s[1].iou.unwrap() - 0.6).abs() < 1e-12);
        assert!((s[1].sensitivity.unwrap() - 0.75).abs() < 1e-12);
        assert!((s[1].accuracy.unwrap() - 0.875).abs() < 1e-12);
    }

    #[test]
    fn undefined_metrics_are_none() {
        let empty = mask_from(&[0, 0, 0, 0], 2, 2);
        let s = metrics(&confusion(&empty, &empty, 2).unwrap());
        assert_eq!(s[1].dice, None);
        assert_eq!(s[1].iou, None);
        assert_eq!(s[1].sensitivity, None);
        assert_eq!(s[1].accuracy, Some(1.0));
    }

    #[test]
    fn dice_iou_identity_and_macro_accuracy() {
        for salt in 10..30u64 {
            let pred = random_mask(16, 16, 2, salt * 2);
            let gt = random_mask(16, 16, 2, salt * 2 + 1);
            let counts = confusion(&pred, &gt, 2).unwrap();
            let scores = metrics(&counts);
            for s in &scores {
                if let (Some(d), Some(i)) = (s.dice, s.iou) {
                    assert!((i - d / (2.0 - d)).abs() < 1e-9);
                    assert!(d >= i);
                }
            }
            // binary macro accuracy equals plain pixel accuracy
            let plain = pred
                .data
                .iter()
                .zip(&gt.data)
                .filter(|(a, b)| a == b)
                .count() as f64
                / 256.0;
            let img = ImageScores { image_id: "x".into(), classes: scores };
            assert_eq!(img.macro_accuracy(), Some(plain));
        }
    }

    #[test]
    fn quantiles_match_r_type7() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert!((s.q1 - 1.75).abs() < 1e-12);
        assert!((s.median - 2.5).abs() < 1e-12);
        assert!((s.q3 - 3.25).abs() < 1e-12);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 4.0);
        assert_eq!(s.n, 4);
    }

    fn test_pairs(n: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                let img = GrayImage::from_fn(8, 8, |x, y| ((x + y + i) % 7) as f64 / 7.0);
                let mut mask = LabelMask::new(8, 8, 2);
                for y in 2..6 {
                    for x in 2..6 {
                        mask.set(x, y, 1);
                    }
                }
                SamplePair::new(img, mask, format!("t{i:02}"))
            })
            .collect()
    }

    #[test]
    fn evaluate_identity_and_constant_predictors() {
        let pairs = test_pairs(3);
        let report =
            evaluate_model("ident", |p| Ok(p.mask.clone()), &pairs, 2).unwrap();
        assert_eq!(report.headline.macro_accuracy, Some(1.0));
        assert_eq!(report.headline.dice, Some(1.0));
        assert_eq!(report.headline.iou, Some(1.0));
        assert_eq!(report.headline.sensitivity, Some(1.0));

        let bg = evaluate_model(
            "allbg",
            |p| Ok(LabelMask::new(p.mask.width, p.mask.height, 2)),
            &pairs,
            2,
        )
        .unwrap();
        assert_eq!(bg.headline.dice, Some(0.0));
        assert!(bg.headline.macro_accuracy.unwrap() > 0.7);

        assert!(matches!(
            evaluate_model("none", |p| Ok(p.mask.clone()), &[], 2),
            Err(Error::EmptyTestSet)
        ));
    }

    #[test]
    fn aggregates_are_means_of_image_scores() {
        let pairs = test_pairs(2);
        let report = evaluate_model(
            "half",
            |p| {
                // perfect on t00, all-background on t01
                if p.id == "t00" {
                    Ok(p.mask.clone())
                } else {
                    Ok(LabelMask::new(8, 8, 2))
                }
            },
            &pairs,
            2,
        )
        .unwrap();
        let d0 = report.images[0].classes[1].dice.unwrap();
        let d1 = report.images[1].classes[1].dice.unwrap();
        assert_eq!(report.headline.dice, Some((d0 + d1) / 2.0));
        assert_eq!(report.aggregates[1].dice.unwrap().mean, (d0 + d1) / 2.0);
    }

    #[test]
    fn report_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = test_pairs(7);
        let report =
            evaluate_model("m", |p| Ok(p.mask.clone()), &pairs, 2).unwrap();
        let path = dir.path().join("report.csv");
        emit_report_csv(&report, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let data_rows = text
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with("aggregate_") && !l.is_empty())
            .count();
        assert_eq!(data_rows, 14);
        let agg_rows = text.lines().filter(|l| l.starts_with("aggregate_")).count();
        assert_eq!(agg_rows, 12);

        let back = parse_report_csv(&path, "m").unwrap();
        assert_eq!(back.images.len(), report.images.len());
        for (a, b) in back.images.iter().zip(&report.images) {
            assert_eq!(a.image_id, b.image_id);
            for (ca, cb) in a.classes.iter().zip(&b.classes) {
                for (x, y) in [
                    (ca.accuracy, cb.accuracy),
                    (ca.dice, cb.dice),
                    (ca.iou, cb.iou),
                    (ca.sensitivity, cb.sensitivity),
                ] {
                    match (x, y) {
                        (Some(x), Some(y)) => assert!((x - y).abs() < 1e-6),
                        (None, None) => {}
                        other => panic!("mismatch {other:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn boxplot_and_scatter_csv() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = test_pairs(7);
        let a = evaluate_model("a", |p| Ok(p.mask.clone()), &pairs, 2).unwrap();
        let b = a.clone();

        let bp = dir.path().join("box.csv");
        emit_boxplot_csv(&[a.clone(), b.clone()], &bp).unwrap();
        let rows = std::fs::read_to_string(&bp).unwrap().lines().count() - 1;
        // 2 models x 7 images x 2 classes x 4 defined metrics
        assert_eq!(rows, 2 * 7 * 2 * 4);
        assert!(emit_boxplot_csv(&[], &bp).is_err());

        let sc = dir.path().join("scatter.csv");
        emit_scatter_csv(&a, &b, &sc).unwrap();
        let text = std::fs::read_to_string(&sc).unwrap();
        let lines: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(lines.len(), 28);
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[2], f[3]);
        }

        let mut other = a.clone();
        for (i, img) in other.images.iter_mut().enumerate() {
            img.image_id = format!("z{i}");
        }
        assert!(matches!(
            emit_scatter_csv(&a, &other, &sc),
            Err(Error::NoCommonImages)
        ));
    }

    #[test]
    fn overlay_tint_arithmetic() {
        let img = GrayImage::from_fn(4, 4, |_, _| 0.4);
        let empty = LabelMask::new(4, 4, 2);
        let base = overlay_prediction(&img, &empty, None).unwrap();
        assert_eq!(base.data[5], [0.4, 0.4, 0.4]);

        let mut pred = LabelMask::new(4, 4, 2);
        for i in 0..16 {
            pred.data[i] = 1;
        }
        let tinted = overlay_prediction(&img, &pred, None).unwrap();
        for px in &tinted.data {
            assert!((px[0] - 0.7).abs() < 1e-12);
            assert!((px[1] - 0.2).abs() < 1e-12);
            assert!((px[2] - 0.2).abs() < 1e-12);
        }

        let mut gt = LabelMask::new(4, 4, 2);
        gt.set(1, 1, 1);
        gt.set(2, 1, 1);
        let with_gt = overlay_prediction(&img, &empty, Some(&gt)).unwrap();
        assert_eq!(with_gt.data[1 * 4 + 1], [0.0, 1.0, 0.0]);
        assert_eq!(with_gt.data[0], [0.4, 0.4, 0.4]);

        let bad = LabelMask::new(3, 4, 2);
        assert!(matches!(
            overlay_prediction(&img, &bad, None),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn resource_measurement() {
        let (value, wall, peak) = measure(|| {
            let v: Vec<u64> = (0..2_000_00u64).collect();
            v.iter().sum::<u64>()
        });
        assert_eq!(value, (0..200_000u64).sum::<u64>());
        assert!(wall >= 0.0);
        if cfg!(target_os = "linux") {
            assert!(peak > 0);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resources.csv");
        let rows = vec![
            PhaseStats {
                model: "rf_fe".into(),
                phase: "train".into(),
                wall_seconds: wall,
                peak_resident_bytes: peak,
            },
            PhaseStats {
                model: "rf_fe".into(),
                phase: "predict".into(),
                wall_seconds: 0.01,
                peak_resident_bytes: peak,
            },
        ];
        resource_report_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("model,phase,wall_seconds,peak_resident_bytes"));
    }
}
