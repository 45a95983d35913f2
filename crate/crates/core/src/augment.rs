//! Seedable x10 data augmentation for image/mask pairs.
//!
//! Each augmented variant applies a randomly included subset of the
//! transform set (geometric first, then photometric) with parameters drawn
//! from a stream keyed by (seed, pair id, variant index). Geometric
//! transforms are applied identically to image and mask; photometric ones
//! touch the image only. Because every variant's stream is keyed
//! independently, parallel and serial augmentation produce identical bytes.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagecore::{GrayImage, LabelMask};
use crate::rng::{fnv1a64, stream};

const AUG_SALT: u64 = 0x41;

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Augmented { source: String, variant: u32 },
}

impl Provenance {
    /// Id of the original image this sample derives from.
    pub fn source_id<'a>(&'a self, own_id: &'a str) -> &'a str {
        match self {
            Provenance::Original => own_id,
            Provenance::Augmented { source, .. } => source,
        }
    }
}

/// An image with its aligned ground-truth mask.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image: GrayImage,
    pub mask: LabelMask,
    pub id: String,
    pub provenance: Provenance,
}

impl SamplePair {
    pub fn new(image: GrayImage, mask: LabelMask, id: impl Into<String>) -> Self {
        assert_eq!(
            (image.width, image.height),
            (mask.width, mask.height),
            "image and mask dimensions must match"
        );
        Self { image, mask, id: id.into(), provenance: Provenance::Original }
    }
}

/// Parameter ranges for the augmentation transform set.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub seed: u64,
    pub factor: usize,
    pub brightness_delta: (f64, f64),
    pub contrast_factor: (f64, f64),
    pub gamma: (f64, f64),
    pub rotation_degrees: (f64, f64),
    pub flip_probability: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub optical_k: (f64, f64),
    pub quality: (u8, u8),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            factor: 10,
            brightness_delta: (-0.2, 0.2),
            contrast_factor: (0.8, 1.2),
            gamma: (0.7, 1.3),
            rotation_degrees: (-30.0, 30.0),
            flip_probability: 0.5,
            elastic_alpha: 34.0,
            elastic_sigma: 4.0,
            optical_k: (-0.05, 0.05),
            quality: (50, 95),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges_ok = self.factor >= 1
            && self.brightness_delta.0 <= self.brightness_delta.1
            && self.contrast_factor.0 <= self.contrast_factor.1
            && self.gamma.0 <= self.gamma.1
            && self.gamma.0 > 0.0
            && self.rotation_degrees.0 <= self.rotation_degrees.1
            && (0.0..=1.0).contains(&self.flip_probability)
            && self.elastic_alpha >= 0.0
            && self.elastic_sigma > 0.0
            && self.optical_k.0 <= self.optical_k.1
            && self.quality.0 >= 1
            && self.quality.0 <= self.quality.1
            && self.quality.1 <= 100;
        if ranges_ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("augmentation ranges are invalid".into()))
        }
    }

    /// Flat `key=value` text, one field per line.
    pub fn to_kv_text(&self) -> String {
        format!(
            "seed={}\nfactor={}\nbrightness_min={}\nbrightness_max={}\n\
             contrast_min={}\ncontrast_max={}\ngamma_min={}\ngamma_max={}\n\
             rotation_min={}\nrotation_max={}\nflip_prob={}\n\
             elastic_alpha={}\nelastic_sigma={}\noptical_k_min={}\noptical_k_max={}\n\
             quality_min={}\nquality_max={}\n",
            self.seed,
            self.factor,
            self.brightness_delta.0,
            self.brightness_delta.1,
            self.contrast_factor.0,
            self.contrast_factor.1,
            self.gamma.0,
            self.gamma.1,
            self.rotation_degrees.0,
            self.rotation_degrees.1,
            self.flip_probability,
            self.elastic_alpha,
            self.elastic_sigma,
            self.optical_k.0,
            self.optical_k.1,
            self.quality.0,
            self.quality.1,
        )
    }

    /// Parse the `key=value` form produced by [`to_kv_text`]; unknown keys
    /// are rejected. Missing keys keep their default.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = AugmentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: missing '='", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: std::num::ParseFloatError| {
                Error::InvalidConfig(format!("key {key}: {e}"))
            };
            match key {
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|e| Error::InvalidConfig(format!("key seed: {e}")))?
                }
                "factor" => {
                    cfg.factor = value
                        .parse()
                        .map_err(|e| Error::InvalidConfig(format!("key factor: {e}")))?
                }
                "brightness_min" => cfg.brightness_delta.0 = value.parse().map_err(bad)?,
                "brightness_max" => cfg.brightness_delta.1 = value.parse().map_err(bad)?,
                "contrast_min" => cfg.contrast_factor.0 = value.parse().map_err(bad)?,
                "contrast_max" => cfg.contrast_factor.1 = value.parse().map_err(bad)?,
                "gamma_min" => cfg.gamma.0 = value.parse().map_err(bad)?,
                "gamma_max" => cfg.gamma.1 = value.parse().map_err(bad)?,
                "rotation_min" => cfg.rotation_degrees.0 = value.parse().map_err(bad)?,
                "rotation_max" => cfg.rotation_degrees.1 = value.parse().map_err(bad)?,
                "flip_prob" => cfg.flip_probability = value.parse().map_err(bad)?,
                "elastic_alpha" => cfg.elastic_alpha = value.parse().map_err(bad)?,
                "elastic_sigma" => cfg.elastic_sigma = value.parse().map_err(bad)?,
                "optical_k_min" => cfg.optical_k.0 = value.parse().map_err(bad)?,
                "optical_k_max" => cfg.optical_k.1 = value.parse().map_err(bad)?,
                "quality_min" => {
                    cfg.quality.0 = value
                        .parse()
                        .map_err(|e| Error::InvalidConfig(format!("key quality_min: {e}")))?
                }
                "quality_max" => {
                    cfg.quality.1 = value
                        .parse()
                        .map_err(|e| Error::InvalidConfig(format!("key quality_max: {e}")))?
                }
                other => {
                    return Err(Error::InvalidConfig(format!("unknown key: {other}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-pixel clamp(v + delta, 0, 1).
pub fn adjust_brightness(img: &GrayImage, delta: f64) -> GrayImage {
    let data = img.data.iter().map(|v| (v + delta).clamp(0.0, 1.0)).collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// Per-pixel clamp(mean + factor * (v - mean), 0, 1), mean over the image.
pub fn adjust_contrast(img: &GrayImage, factor: f64) -> GrayImage {
    let mean = if img.data.is_empty() {
        0.0
    } else {
        img.data.iter().sum::<f64>() / img.data.len() as f64
    };
    let data = img
        .data
        .iter()
        .map(|v| (mean + factor * (v - mean)).clamp(0.0, 1.0))
        .collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// Per-pixel v^gamma.
pub fn adjust_gamma(img: &GrayImage, gamma: f64) -> GrayImage {
    assert!(gamma > 0.0);
    let data = img.data.iter().map(|v| v.powf(gamma)).collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// Inverse-map source coordinate for a rotation of `degrees` about the
/// image center.
#[inline]
fn rotate_src(x: usize, y: usize, cx: f64, cy: f64, cos: f64, sin: f64) -> (f64, f64) {
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
}

/// Rotate image and mask about the center; dimensions are preserved,
/// out-of-bounds areas become 0 / class 0.
pub fn rotate(img: &GrayImage, mask: &LabelMask, degrees: f64) -> (GrayImage, LabelMask) {
    let (w, h) = (img.width, img.height);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out_img = GrayImage::new(w, h);
    let mut out_mask = LabelMask::new(w, h, mask.n_classes);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = rotate_src(x, y, cx, cy, cos, sin);
            out_img.set(x, y, img.sample_bilinear_zero(sx, sy).clamp(0.0, 1.0));
            out_mask.set(x, y, mask.sample_nearest_zero(sx, sy));
        }
    }
    (out_img, out_mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

/// Exact index mirror along the given axis.
pub fn flip(img: &GrayImage, mask: &LabelMask, axis: FlipAxis) -> (GrayImage, LabelMask) {
    let (w, h) = (img.width, img.height);
    let map = |x: usize, y: usize| match axis {
        FlipAxis::Horizontal => (w - 1 - x, y),
        FlipAxis::Vertical => (x, h - 1 - y),
    };
    let out_img = GrayImage::from_fn(w, h, |x, y| {
        let (sx, sy) = map(x, y);
        img.get(sx, sy)
    });
    let mut out_mask = LabelMask::new(w, h, mask.n_classes);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x, y);
            out_mask.set(x, y, mask.get(sx, sy));
        }
    }
    (out_img, out_mask)
}

/// Separable Gaussian smoothing with border renormalization (kernel weights
/// falling outside the line are dropped and the window re-normalized).
fn gaussian_smooth(field: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let sx = x as i64 + ki as i64 - radius;
                if sx >= 0 && (sx as usize) < w {
                    acc += kw * field[y * w + sx as usize];
                    norm += kw;
                }
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let sy = y as i64 + ki as i64 - radius;
                if sy >= 0 && (sy as usize) < h {
                    acc += kw * tmp[sy as usize * w + x];
                    norm += kw;
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

/// Warp by a Gaussian-smoothed random displacement field: per pixel a
/// displacement is drawn uniform in [-1,1]^2, smoothed with std `sigma`,
/// scaled by `alpha`, and the same field samples both image and mask.
pub fn elastic_transform(
    img: &GrayImage,
    mask: &LabelMask,
    alpha: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> (GrayImage, LabelMask) {
    let (w, h) = (img.width, img.height);
    let n = w * h;
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for _ in 0..n {
        dx.push(rng.random_range(-1.0..=1.0));
    }
    for _ in 0..n {
        dy.push(rng.random_range(-1.0..=1.0));
    }
    if alpha == 0.0 {
        return (img.clone(), mask.clone());
    }
    let dx = gaussian_smooth(&dx, w, h, sigma);
    let dy = gaussian_smooth(&dy, w, h, sigma);

    let mut out_img = GrayImage::new(w, h);
    let mut out_mask = LabelMask::new(w, h, mask.n_classes);
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + alpha * dx[y * w + x];
            let sy = y as f64 + alpha * dy[y * w + x];
            out_img.set(x, y, img.sample_bilinear_zero(sx, sy).clamp(0.0, 1.0));
            out_mask.set(x, y, mask.sample_nearest_zero(sx, sy));
        }
    }
    (out_img, out_mask)
}

/// Source coordinate of the radial distortion model: a destination pixel at
/// normalized radius r (1.0 at the corner) samples radius r * (1 + k r^2).
#[inline]
fn optical_src(x: usize, y: usize, cx: f64, cy: f64, r_max: f64, k: f64) -> (f64, f64) {
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    if r_max == 0.0 {
        return (x as f64, y as f64);
    }
    let r2 = (dx * dx + dy * dy) / (r_max * r_max);
    let scale = 1.0 + k * r2;
    (cx + dx * scale, cy + dy * scale)
}

/// Radial barrel/pincushion distortion applied to image and mask alike.
pub fn optical_distortion(img: &GrayImage, mask: &LabelMask, k: f64) -> (GrayImage, LabelMask) {
    let (w, h) = (img.width, img.height);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let r_max = (cx * cx + cy * cy).sqrt();
    let mut out_img = GrayImage::new(w, h);
    let mut out_mask = LabelMask::new(w, h, mask.n_classes);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = optical_src(x, y, cx, cy, r_max, k);
            out_img.set(x, y, img.sample_bilinear_zero(sx, sy).clamp(0.0, 1.0));
            out_mask.set(x, y, mask.sample_nearest_zero(sx, sy));
        }
    }
    (out_img, out_mask)
}

/// Standard JPEG luminance quantization table.
const JPEG_LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as i64;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut table = [0.0; 64];
    for (i, &base) in JPEG_LUMA_BASE.iter().enumerate() {
        let v = (base as i64 * scale + 50) / 100;
        table[i] = v.clamp(1, 255) as f64;
    }
    table
}

struct Dct8 {
    // cos[(2x+1) u pi / 16] premultiplied by the orthonormal factor a(u)
    basis: [[f64; 8]; 8],
}

impl Dct8 {
    fn new() -> Self {
        let mut basis = [[0.0; 8]; 8];
        for u in 0..8 {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for x in 0..8 {
                basis[x][u] =
                    a * (((2 * x + 1) as f64) * (u as f64) * std::f64::consts::PI / 16.0).cos();
            }
        }
        Self { basis }
    }

    fn forward(&self, block: &[f64; 64], out: &mut [f64; 64]) {
        let mut tmp = [0.0; 64];
        for y in 0..8 {
            for u in 0..8 {
                let mut acc = 0.0;
                for x in 0..8 {
                    acc += block[y * 8 + x] * self.basis[x][u];
                }
                tmp[y * 8 + u] = acc;
            }
        }
        for u in 0..8 {
            for v in 0..8 {
                let mut acc = 0.0;
                for y in 0..8 {
                    acc += tmp[y * 8 + u] * self.basis[y][v];
                }
                out[v * 8 + u] = acc;
            }
        }
    }

    fn inverse(&self, coeffs: &[f64; 64], out: &mut [f64; 64]) {
        let mut tmp = [0.0; 64];
        for v in 0..8 {
            for x in 0..8 {
                let mut acc = 0.0;
                for u in 0..8 {
                    acc += coeffs[v * 8 + u] * self.basis[x][u];
                }
                tmp[v * 8 + x] = acc;
            }
        }
        for x in 0..8 {
            for y in 0..8 {
                let mut acc = 0.0;
                for v in 0..8 {
                    acc += tmp[v * 8 + x] * self.basis[y][v];
                }
                out[y * 8 + x] = acc;
            }
        }
    }
}

/// Run the image through lossy 8x8 block DCT quantization at the given
/// quality (JPEG-style table scaling) and decode it back. The mask is not
/// part of this transform.
pub fn compression_artifact(img: &GrayImage, quality: u8) -> GrayImage {
    assert!((1..=100).contains(&quality));
    let (w, h) = (img.width, img.height);
    let bw = w.div_ceil(8) * 8;
    let bh = h.div_ceil(8) * 8;
    let table = quant_table(quality);
    let dct = Dct8::new();

    // edge-replicated working canvas in the shifted 0-centered domain
    let mut canvas = vec![0.0; bw * bh];
    for y in 0..bh {
        let sy = y.min(h - 1);
        for x in 0..bw {
            let sx = x.min(w - 1);
            canvas[y * bw + x] = img.get(sx, sy) * 255.0 - 128.0;
        }
    }

    let mut block = [0.0; 64];
    let mut coeffs = [0.0; 64];
    let mut recon = [0.0; 64];
    for by in (0..bh).step_by(8) {
        for bx in (0..bw).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = canvas[(by + y) * bw + bx + x];
                }
            }
            dct.forward(&block, &mut coeffs);
            for i in 0..64 {
                coeffs[i] = (coeffs[i] / table[i]).round() * table[i];
            }
            dct.inverse(&coeffs, &mut recon);
            for y in 0..8 {
                for x in 0..8 {
                    canvas[(by + y) * bw + bx + x] = recon[y * 8 + x];
                }
            }
        }
    }

    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(((canvas[y * bw + x] + 128.0) / 255.0).clamp(0.0, 1.0));
        }
    }
    GrayImage { width: w, height: h, data }
}

fn augment_variant(pair: &SamplePair, cfg: &AugmentConfig, variant: u32) -> SamplePair {
    let mut rng = stream(cfg.seed, &[AUG_SALT, fnv1a64(pair.id.as_bytes()), variant as u64]);
    let mut img = pair.image.clone();
    let mut mask = pair.mask.clone();

    // geometric transforms, identical mapping for image and mask
    if rng.random_bool(0.5) {
        let degrees = rng.random_range(cfg.rotation_degrees.0..=cfg.rotation_degrees.1);
        (img, mask) = rotate(&img, &mask, degrees);
    }
    if rng.random_bool(cfg.flip_probability) {
        (img, mask) = flip(&img, &mask, FlipAxis::Horizontal);
    }
    if rng.random_bool(cfg.flip_probability) {
        (img, mask) = flip(&img, &mask, FlipAxis::Vertical);
    }
    if rng.random_bool(0.5) {
        (img, mask) = elastic_transform(&img, &mask, cfg.elastic_alpha, cfg.elastic_sigma, &mut rng);
    }
    if rng.random_bool(0.5) {
        let k = rng.random_range(cfg.optical_k.0..=cfg.optical_k.1);
        (img, mask) = optical_distortion(&img, &mask, k);
    }

    // photometric transforms, image only
    if rng.random_bool(0.5) {
        let delta = rng.random_range(cfg.brightness_delta.0..=cfg.brightness_delta.1);
        img = adjust_brightness(&img, delta);
    }
    if rng.random_bool(0.5) {
        let factor = rng.random_range(cfg.contrast_factor.0..=cfg.contrast_factor.1);
        img = adjust_contrast(&img, factor);
    }
    if rng.random_bool(0.5) {
        let gamma = rng.random_range(cfg.gamma.0..=cfg.gamma.1);
        img = adjust_gamma(&img, gamma);
    }
    if rng.random_bool(0.5) {
        let quality = rng.random_range(cfg.quality.0..=cfg.quality.1);
        img = compression_artifact(&img, quality);
    }

    SamplePair {
        image: img,
        mask,
        id: format!("{}_aug{:02}", pair.id, variant),
        provenance: Provenance::Augmented { source: pair.id.clone(), variant },
    }
}

/// Expand the dataset by `cfg.factor`: every original pair is kept and
/// gains `factor - 1` augmented variants.
pub fn augment_dataset(pairs: &[SamplePair], cfg: &AugmentConfig) -> Vec<SamplePair> {
    pairs
        .par_iter()
        .map(|pair| {
            let mut group = Vec::with_capacity(cfg.factor);
            group.push(pair.clone());
            for variant in 1..cfg.factor as u32 {
                group.push(augment_variant(pair, cfg, variant));
            }
            group
        })
        .flatten()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| (x + y * w) as f64 / (w * h) as f64)
    }

    fn blob_mask(w: usize, h: usize) -> LabelMask {
        let mut m = LabelMask::new(w, h, 2);
        for y in h / 4..3 * h / 4 {
            for x in w / 4..3 * w / 4 {
                m.set(x, y, 1);
            }
        }
        m
    }

    #[test]
    fn brightness_formula_and_clamp() {
        let img = GrayImage::from_vec(2, 1, vec![0.5, 0.95]);
        assert_eq!(adjust_brightness(&img, 0.0), img);
        let out = adjust_brightness(&img, 0.2);
        assert!((out.data[0] - 0.7).abs() < 1e-12);
        assert_eq!(out.data[1], 1.0);
    }

    #[test]
    fn contrast_formula() {
        let img = GrayImage::from_vec(2, 1, vec![0.25, 0.75]);
        assert_eq!(adjust_contrast(&img, 1.0), img);
        let flat = adjust_contrast(&img, 0.0);
        assert!(flat.data.iter().all(|v| (v - 0.5).abs() < 1e-12));
        let out = adjust_contrast(&img, 2.0);
        assert_eq!(out.data, vec![0.0, 1.0]);
    }

    #[test]
    fn gamma_formula() {
        let img = GrayImage::from_vec(3, 1, vec![0.0, 1.0, 0.25]);
        assert_eq!(adjust_gamma(&img, 1.0), img);
        let out = adjust_gamma(&img, 0.5);
        assert_eq!(out.data[0], 0.0);
        assert_eq!(out.data[1], 1.0);
        assert!((out.data[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotate_zero_and_full_turn() {
        let img = ramp(6, 6);
        let mask = blob_mask(6, 6);
        let (i0, m0) = rotate(&img, &mask, 0.0);
        assert_eq!(i0, img);
        assert_eq!(m0, mask);
        let (i360, m360) = rotate(&img, &mask, 360.0);
        for (a, b) in i360.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(m360, mask);
    }

    #[test]
    fn rotate_quarter_turn_matches_permutation() {
        let img = ramp(7, 7);
        let mask = blob_mask(7, 7);
        let (ri, rm) = rotate(&img, &mask, 90.0);
        // oracle: out(x, y) = in(y, w-1-x)
        for y in 0..7 {
            for x in 0..7 {
                let want = img.get(y, 6 - x);
                assert!((ri.get(x, y) - want).abs() < 1e-6, "pixel ({x},{y})");
                assert_eq!(rm.get(x, y), mask.get(y, 6 - x));
            }
        }
    }

    #[test]
    fn flip_mirrors_and_is_involutive() {
        let img = GrayImage::from_vec(2, 1, vec![0.2, 0.9]);
        let mask = LabelMask::from_vec(2, 1, 2, vec![0, 1]);
        let (fi, fm) = flip(&img, &mask, FlipAxis::Horizontal);
        assert_eq!(fi.data, vec![0.9, 0.2]);
        assert_eq!(fm.data, vec![1, 0]);
        let (ffi, ffm) = flip(&fi, &fm, FlipAxis::Horizontal);
        assert_eq!(ffi, img);
        assert_eq!(ffm, mask);

        let c = GrayImage::from_fn(3, 3, |_, _| 0.4);
        let cm = LabelMask::new(3, 3, 2);
        let (fc, _) = flip(&c, &cm, FlipAxis::Vertical);
        assert_eq!(fc, c);
    }

    #[test]
    fn elastic_alpha_zero_is_identity_and_seed_reproducible() {
        let img = ramp(16, 16);
        let mask = blob_mask(16, 16);
        let mut rng = stream(1, &[2]);
        let (i0, m0) = elastic_transform(&img, &mask, 0.0, 4.0, &mut rng);
        assert_eq!(i0, img);
        assert_eq!(m0, mask);

        let mut r1 = stream(9, &[7]);
        let mut r2 = stream(9, &[7]);
        let (a_img, a_mask) = elastic_transform(&img, &mask, 34.0, 4.0, &mut r1);
        let (b_img, b_mask) = elastic_transform(&img, &mask, 34.0, 4.0, &mut r2);
        assert_eq!(a_img, b_img);
        assert_eq!(a_mask, b_mask);
    }

    #[test]
    fn huge_sigma_smoothing_approaches_uniform_field() {
        let mut rng = stream(3, &[4]);
        let field: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let smoothed = gaussian_smooth(&field, 16, 16, 1000.0);
        let min = smoothed.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max - min < 1e-3, "spread {}", max - min);
    }

    #[test]
    fn optical_distortion_identity_center_and_corner() {
        let img = ramp(101, 101);
        let mask = blob_mask(101, 101);
        let (i0, m0) = optical_distortion(&img, &mask, 0.0);
        assert_eq!(i0, img);
        assert_eq!(m0, mask);

        let k = 0.05;
        let (oi, _) = optical_distortion(&img, &mask, k);
        // center pixel fixed for any k
        assert!((oi.get(50, 50) - img.get(50, 50)).abs() < 1e-12);
        // corner (0,0): r = 1, so src = c + (d - c) * 1.05 = (-2.5, -2.5)
        let (sx, sy) = optical_src(0, 0, 50.0, 50.0, (50.0f64 * 50.0 * 2.0).sqrt(), k);
        assert!((sx - -2.5).abs() < 1e-9 && (sy - -2.5).abs() < 1e-9);
        assert!((oi.get(0, 0) - img.sample_bilinear_zero(sx, sy)).abs() < 1e-12);
    }

    #[test]
    fn compression_bounds_and_constant_block() {
        let img = ramp(24, 24);
        let out = compression_artifact(&img, 100);
        let max_err = img
            .data
            .iter()
            .zip(&out.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 0.02, "max err {max_err}");

        let c = GrayImage::from_fn(16, 16, |_, _| 0.42);
        let cc = compression_artifact(&c, 50);
        let first = cc.data[0];
        assert!(cc.data.iter().all(|v| (v - first).abs() < 1e-9));
        assert!(cc.data.iter().all(|v| (0.0..=1.0).contains(v)));

        let low = compression_artifact(&img, 1);
        assert!(low.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dataset_factor_counts() {
        let pairs: Vec<SamplePair> = (0..34)
            .map(|i| SamplePair::new(ramp(8, 8), blob_mask(8, 8), format!("img{i:03}")))
            .collect();
        let cfg = AugmentConfig { seed: 5, ..Default::default() };
        let out = augment_dataset(&pairs, &cfg);
        assert_eq!(out.len(), 340);

        let out20 = augment_dataset(&pairs[..20], &cfg);
        assert_eq!(out20.len(), 200);

        let cfg1 = AugmentConfig { factor: 1, ..cfg };
        let same = augment_dataset(&pairs, &cfg1);
        assert_eq!(same.len(), 34);
        for (a, b) in same.iter().zip(&pairs) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_shape_preserving() {
        let pairs: Vec<SamplePair> = (0..4)
            .map(|i| SamplePair::new(ramp(12, 10), blob_mask(12, 10), format!("p{i}")))
            .collect();
        let cfg = AugmentConfig { seed: 11, ..Default::default() };
        let a = augment_dataset(&pairs, &cfg);
        let b = augment_dataset(&pairs, &cfg);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.mask.data, y.mask.data);
            assert_eq!(x.id, y.id);
        }
        for p in &a {
            assert_eq!((p.image.width, p.image.height), (p.mask.width, p.mask.height));
            assert!(p.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(p.mask.data.iter().all(|&c| (c as usize) < p.mask.n_classes));
        }
    }

    #[test]
    fn kv_roundtrip_and_unknown_key() {
        let cfg = AugmentConfig { seed: 77, factor: 4, ..Default::default() };
        let text = cfg.to_kv_text();
        let back = AugmentConfig::from_kv_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(AugmentConfig::from_kv_text("bogus=1\n").is_err());
    }
}
