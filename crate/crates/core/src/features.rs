//! Per-pixel feature extraction for the pixel-wise architecture and the
//! flattened representation for the whole-image architecture.
//!
//! Each pixel yields 172 columns: its intensity, the 13x13 window mean of
//! the image, the 13x13 window mean of the Sobel magnitude, and the raw
//! 13x13 intensity patch (row-major). Window statistics come from integral
//! images so matrix assembly is O(pixels).

use rand::Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

use crate::augment::SamplePair;
use crate::error::{Error, Result};
use crate::imagecore::GrayImage;
use crate::rng::stream;

const FEAT_SALT: u64 = 0x46;
const PFMX_MAGIC: &[u8; 4] = b"PFMX";
const PFMX_VERSION: u32 = 1;

/// Gradient magnitude image produced by [`sobel_magnitude`].
#[derive(Debug, Clone, PartialEq)]
pub struct SobelImage {
    pub width: usize,
    pub height: usize,
    /// Row-major magnitudes, all >= 0.
    pub data: Vec<f64>,
}

impl SobelImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    pub fn integral(&self) -> IntegralImage {
        IntegralImage::from_values(self.width, self.height, &self.data)
    }
}

/// Summed-area table over a `width` x `height` source. Entry `(i, j)` holds
/// the sum of all source pixels in rows `< i` and columns `< j`, so the
/// table is `(height+1) x (width+1)` with a zero first row and column.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl IntegralImage {
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height);
        let stride = width + 1;
        let mut data = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row_sum = 0.0;
            for x in 0..width {
                row_sum += values[y * width + x];
                data[(y + 1) * stride + x + 1] = data[y * stride + x + 1] + row_sum;
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i <= self.height && j <= self.width);
        self.data[i * (self.width + 1) + j]
    }

    /// Sum over source rows `y0..y1` and columns `x0..x1` (exclusive ends).
    #[inline]
    pub fn rect_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        debug_assert!(x0 <= x1 && y0 <= y1);
        self.at(y1, x1) - self.at(y0, x1) - self.at(y1, x0) + self.at(y0, x0)
    }
}

/// Column layout of the per-pixel feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    /// Window and patch side length; odd.
    pub window: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self { window: 13 }
    }
}

impl FeatureLayout {
    pub fn new(window: usize) -> Self {
        assert!(window % 2 == 1, "window must be odd");
        Self { window }
    }

    /// 3 scalar columns plus the k*k patch.
    #[inline]
    pub fn total_columns(&self) -> usize {
        3 + self.window * self.window
    }

    /// Column index of the patch element that coincides with the pixel
    /// itself (always equal to column 0).
    #[inline]
    pub fn patch_center_column(&self) -> usize {
        let half = self.window / 2;
        3 + half * self.window + half
    }
}

/// Identity of the pixel behind a feature-matrix row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOrigin {
    /// Index into [`FeatureMatrix::image_ids`].
    pub image: u32,
    pub x: u16,
    pub y: u16,
}

/// Row-major table of per-pixel features with aligned labels and per-row
/// pixel provenance. Values are kept as `f32`: with every pixel of 340
/// images at 512x512 the table reaches ~89.1M rows, and 172 columns of
/// wider reals would not fit desk-scale memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f32>,
    pub labels: Vec<u8>,
    pub provenance: Vec<RowOrigin>,
    pub image_ids: Vec<String>,
    pub n_classes: usize,
}

impl FeatureMatrix {
    /// Wrap a raw table, synthesizing placeholder provenance. Intended for
    /// tests and for matrices not tied to images.
    pub fn from_parts(n_cols: usize, values: Vec<f32>, labels: Vec<u8>) -> Self {
        assert!(n_cols > 0);
        assert_eq!(values.len(), labels.len() * n_cols);
        let n_rows = labels.len();
        let n_classes = (labels.iter().copied().max().map_or(0, |m| m as usize + 1)).max(2);
        let provenance = (0..n_rows)
            .map(|r| RowOrigin { image: 0, x: (r % 65536) as u16, y: (r / 65536) as u16 })
            .collect();
        Self {
            n_rows,
            n_cols,
            values,
            labels,
            provenance,
            image_ids: vec!["mem".to_string()],
            n_classes,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.n_cols..(r + 1) * self.n_cols]
    }

    /// (image id, x, y) of a row.
    pub fn origin(&self, r: usize) -> (&str, u16, u16) {
        let o = self.provenance[r];
        (&self.image_ids[o.image as usize], o.x, o.y)
    }

    /// Write as flat binary: magic "PFMX", version u32, n_rows u64,
    /// n_cols u32, then f32 values row-major, then one label byte per row.
    /// All fields little-endian. Provenance is in-memory only.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.values.len() * 4 + self.labels.len());
        buf.extend_from_slice(PFMX_MAGIC);
        buf.extend_from_slice(&PFMX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n_rows as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n_cols as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.labels);
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        file.write_all(&buf)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::TruncatedData);
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        if take(&mut cursor, 4)? != PFMX_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != PFMX_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n_rows = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let n_cols = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        if n_cols == 0 {
            return Err(Error::MalformedModel("feature matrix with zero columns".into()));
        }
        let n_vals = n_rows
            .checked_mul(n_cols)
            .ok_or_else(|| Error::MalformedModel("row/column count overflow".into()))?;
        let mut values = Vec::with_capacity(n_vals);
        for chunk in take(&mut cursor, n_vals * 4)?.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let labels = take(&mut cursor, n_rows)?.to_vec();
        Ok(Self::from_parts(n_cols, values, labels))
    }
}

/// Gradient magnitude from the standard 3x3 Sobel kernels with
/// replicate-edge borders: sqrt(Gx^2 + Gy^2), unnormalized.
pub fn sobel_magnitude(img: &GrayImage) -> SobelImage {
    assert!(img.width >= 1 && img.height >= 1);
    let (w, h) = (img.width, img.height);
    let clamp_get = |x: i64, y: i64| -> f64 {
        let cx = x.clamp(0, w as i64 - 1) as usize;
        let cy = y.clamp(0, h as i64 - 1) as usize;
        img.get(cx, cy)
    };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = |dx: i64, dy: i64| clamp_get(x + dx, y + dy);
            // opposing taps are differenced first so flat regions cancel
            // exactly instead of leaving rounding residue
            let gx = (p(1, -1) - p(-1, -1)) + 2.0 * (p(1, 0) - p(-1, 0)) + (p(1, 1) - p(-1, 1));
            let gy = (p(-1, 1) - p(-1, -1)) + 2.0 * (p(0, 1) - p(0, -1)) + (p(1, 1) - p(1, -1));
            data.push((gx * gx + gy * gy).sqrt());
        }
    }
    SobelImage { width: w, height: h, data }
}

/// Summed-area table of an image.
pub fn integral_image(img: &GrayImage) -> IntegralImage {
    IntegralImage::from_values(img.width, img.height, &img.data)
}

/// Mean over the k x k window centered at (x, y). Out-of-bounds cells
/// contribute 0 and the divisor is always k^2.
pub fn window_mean(t: &IntegralImage, x: usize, y: usize, k: usize) -> f64 {
    debug_assert!(k % 2 == 1);
    debug_assert!(x < t.width && y < t.height);
    let half = (k / 2) as i64;
    let x0 = (x as i64 - half).clamp(0, t.width as i64) as usize;
    let x1 = (x as i64 + half + 1).clamp(0, t.width as i64) as usize;
    let y0 = (y as i64 - half).clamp(0, t.height as i64) as usize;
    let y1 = (y as i64 + half + 1).clamp(0, t.height as i64) as usize;
    if x0 >= x1 || y0 >= y1 {
        return 0.0;
    }
    t.rect_sum(x0, y0, x1, y1) / (k * k) as f64
}

/// Row-major k x k window of intensities centered at (x, y), zero outside
/// the image.
pub fn extract_patch(img: &GrayImage, x: usize, y: usize, k: usize) -> Vec<f64> {
    debug_assert!(k % 2 == 1);
    let half = (k / 2) as i64;
    let mut out = Vec::with_capacity(k * k);
    for dy in -half..=half {
        for dx in -half..=half {
            let sx = x as i64 + dx;
            let sy = y as i64 + dy;
            if sx >= 0 && sx < img.width as i64 && sy >= 0 && sy < img.height as i64 {
                out.push(img.get(sx as usize, sy as usize));
            } else {
                out.push(0.0);
            }
        }
    }
    out
}

/// Full feature vector of one pixel in [`FeatureLayout`] order.
pub fn pixel_features(
    img: &GrayImage,
    sob: &SobelImage,
    ti: &IntegralImage,
    ts: &IntegralImage,
    x: usize,
    y: usize,
    layout: FeatureLayout,
) -> Vec<f64> {
    let k = layout.window;
    let mut out = Vec::with_capacity(layout.total_columns());
    out.push(img.get(x, y));
    out.push(window_mean(ti, x, y, k));
    out.push(window_mean(ts, x, y, k));
    out.extend(extract_patch(img, x, y, k));
    debug_assert!(sob.width == img.width && sob.height == img.height);
    out
}

/// Pixel selection policy for [`build_feature_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Every pixel of every image, scan order. At full scale this is huge:
    /// 340 images of 512x512 give 89,128,960 rows (~61 GB of f32 values);
    /// prefer a subsampling policy on desk hardware.
    All,
    /// `n` distinct pixels per image, drawn uniformly (all pixels if the
    /// image has fewer).
    PerImageCount(usize),
    /// `n / n_classes` pixels per class per image, drawn with replacement
    /// when a class has fewer pixels than that. Classes absent from an
    /// image contribute no rows.
    Balanced(usize),
}

struct ImageRows {
    values: Vec<f32>,
    labels: Vec<u8>,
    coords: Vec<(u16, u16)>,
}

fn sample_pixels(pair: &SamplePair, index: usize, sampling: Sampling, seed: u64) -> Vec<usize> {
    let (w, h) = (pair.image.width, pair.image.height);
    let total = w * h;
    match sampling {
        Sampling::All => (0..total).collect(),
        Sampling::PerImageCount(n) => {
            let n_eff = n.min(total);
            let mut pool: Vec<usize> = (0..total).collect();
            let mut rng = stream(seed, &[FEAT_SALT, index as u64]);
            for j in 0..n_eff {
                let pick = rng.random_range(j..total);
                pool.swap(j, pick);
            }
            pool.truncate(n_eff);
            pool
        }
        Sampling::Balanced(n) => {
            let per_class = n / pair.mask.n_classes;
            let mut out = Vec::new();
            for class in 0..pair.mask.n_classes as u8 {
                let pool: Vec<usize> = (0..total)
                    .filter(|&i| pair.mask.data[i] == class)
                    .collect();
                if pool.is_empty() {
                    continue;
                }
                let mut rng = stream(seed, &[FEAT_SALT, index as u64, class as u64]);
                if pool.len() >= per_class {
                    let mut pool = pool;
                    for j in 0..per_class {
                        let pick = rng.random_range(j..pool.len());
                        pool.swap(j, pick);
                    }
                    out.extend_from_slice(&pool[..per_class]);
                } else {
                    for _ in 0..per_class {
                        out.push(pool[rng.random_range(0..pool.len())]);
                    }
                }
            }
            out
        }
    }
}

fn image_rows(pair: &SamplePair, index: usize, sampling: Sampling, seed: u64) -> ImageRows {
    let layout = FeatureLayout::default();
    let k = layout.window;
    let n_cols = layout.total_columns();
    let sob = sobel_magnitude(&pair.image);
    let ti = integral_image(&pair.image);
    let ts = sob.integral();
    let picks = sample_pixels(pair, index, sampling, seed);

    let mut values = Vec::with_capacity(picks.len() * n_cols);
    let mut labels = Vec::with_capacity(picks.len());
    let mut coords = Vec::with_capacity(picks.len());
    let w = pair.image.width;
    for pix in picks {
        let (x, y) = (pix % w, pix / w);
        values.push(pair.image.get(x, y) as f32);
        values.push(window_mean(&ti, x, y, k) as f32);
        values.push(window_mean(&ts, x, y, k) as f32);
        let half = (k / 2) as i64;
        for dy in -half..=half {
            for dx in -half..=half {
                let sx = x as i64 + dx;
                let sy = y as i64 + dy;
                let v = if sx >= 0
                    && sx < pair.image.width as i64
                    && sy >= 0
                    && sy < pair.image.height as i64
                {
                    pair.image.get(sx as usize, sy as usize)
                } else {
                    0.0
                };
                values.push(v as f32);
            }
        }
        labels.push(pair.mask.get(x, y));
        coords.push((x as u16, y as u16));
    }
    ImageRows { values, labels, coords }
}

/// Assemble the per-pixel training table. Rows are grouped by input pair
/// order; within a pair they follow scan order (`all`) or the seeded draw
/// order, so the result is identical however many threads run.
pub fn build_feature_matrix(
    pairs: &[SamplePair],
    sampling: Sampling,
    seed: u64,
) -> Result<FeatureMatrix> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (w0, h0) = (pairs[0].image.width, pairs[0].image.height);
    for p in pairs {
        if (p.image.width, p.image.height) != (w0, h0) {
            return Err(Error::DimensionMismatch(format!(
                "pair {} is {}x{}, expected {}x{}",
                p.id, p.image.width, p.image.height, w0, h0
            )));
        }
    }
    let layout = FeatureLayout::default();
    let blocks: Vec<ImageRows> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| image_rows(pair, i, sampling, seed))
        .collect();

    let n_rows: usize = blocks.iter().map(|b| b.labels.len()).sum();
    let n_cols = layout.total_columns();
    let mut values = Vec::with_capacity(n_rows * n_cols);
    let mut labels = Vec::with_capacity(n_rows);
    let mut provenance = Vec::with_capacity(n_rows);
    for (i, block) in blocks.into_iter().enumerate() {
        values.extend_from_slice(&block.values);
        labels.extend_from_slice(&block.labels);
        provenance.extend(
            block
                .coords
                .into_iter()
                .map(|(x, y)| RowOrigin { image: i as u32, x, y }),
        );
    }
    let n_classes = pairs.iter().map(|p| p.mask.n_classes).max().unwrap_or(2);
    Ok(FeatureMatrix {
        n_rows,
        n_cols,
        values,
        labels,
        provenance,
        image_ids: pairs.iter().map(|p| p.id.clone()).collect(),
        n_classes,
    })
}

/// Row-major flatten of a Sobel image; the paired label vector for the
/// whole-image architecture is the row-major flattened mask.
pub fn flatten_whole_image(sob: &SobelImage) -> Vec<f64> {
    sob.data.clone()
}
