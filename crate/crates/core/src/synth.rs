//! Synthetic dataset generators for download-free end-to-end runs.
//!
//! Two families mirror the two qualitative regimes the toolkit targets:
//! `Blobs` are bright anti-aliased ellipses on a textured background and
//! are locally decidable from intensity statistics; `Vessels` are thin
//! low-contrast branching walks whose positions vary freely between
//! images, which defeats any model keyed to absolute pixel positions.
//! Masks are exact by construction (blob pixels by center-inside tests,
//! vessel pixels by the rasterized walk); only images receive noise.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::SamplePair;
use crate::error::{Error, Result};
use crate::imagecore::{save_gray, save_mask, GrayImage, LabelMask};
use crate::rng::stream;

const SYNTH_SALT: u64 = 0x53;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Blobs,
    Vessels,
}

impl SynthKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthKind::Blobs => "blob",
            SynthKind::Vessels => "vessel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n_images: usize, width: usize, height: usize, seed: u64) -> Self {
        Self { kind, n_images, width, height, seed, noise_sigma: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::InvalidConfig("synthetic images must be at least 32x32".into()));
        }
        if self.n_images < 1 {
            return Err(Error::InvalidConfig("n_images must be at least 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Low-frequency value noise in [0,1]: a coarse random grid sampled with
/// bilinear interpolation.
fn value_noise(w: usize, h: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(0.0..=1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let tx = fx - x0 as f64;
            let ty = fy - y0 as f64;
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
            let bot = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    level: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

fn blob_pair(spec: &SynthSpec, index: usize) -> SamplePair {
    let (w, h) = (spec.width, spec.height);
    let mut rng = stream(spec.seed, &[SYNTH_SALT, index as u64]);
    let texture = value_noise(w, h, 16, &mut rng);

    let axis_max = (w.min(h) / 4) as f64;
    let n_blobs = rng.random_range(1..=3usize);
    let ellipses: Vec<Ellipse> = (0..n_blobs)
        .map(|_| {
            let cx = rng.random_range(0.15 * w as f64..0.85 * w as f64);
            let cy = rng.random_range(0.15 * h as f64..0.85 * h as f64);
            let a = rng.random_range(8.0..=axis_max);
            let b = rng.random_range(8.0..=axis_max);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let level = rng.random_range(0.62..=0.87);
            Ellipse { cx, cy, a, b, cos: theta.cos(), sin: theta.sin(), level }
        })
        .collect();

    let mut mask = LabelMask::new(w, h, 2);
    let mut img = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let bg = 0.18 + 0.18 * texture[y * w + x];
            // mask: exact center-inside test
            if ellipses.iter().any(|e| e.contains(x as f64, y as f64)) {
                mask.set(x, y, 1);
            }
            // image: 4x4 supersampled coverage for anti-aliased edges
            let mut acc = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                    acc += ellipses
                        .iter()
                        .find(|e| e.contains(px, py))
                        .map_or(bg, |e| e.level);
                }
            }
            let noisy = acc / 16.0 + spec.noise_sigma * gauss(&mut rng);
            img.set(x, y, noisy.clamp(0.0, 1.0));
        }
    }
    SamplePair::new(img, mask, format!("blob_{index:03}"))
}

fn vessel_pair(spec: &SynthSpec, index: usize) -> SamplePair {
    let (w, h) = (spec.width, spec.height);
    let mut rng = stream(spec.seed, &[SYNTH_SALT, index as u64]);
    let texture = value_noise(w, h, 16, &mut rng);

    let mut mask = LabelMask::new(w, h, 2);
    // (x, y, heading) of every plotted point; later branches fork from them
    let mut trail: Vec<(f64, f64, f64)> = Vec::new();
    let n_branches = rng.random_range(2..=5usize);
    for branch in 0..n_branches {
        let (mut x, mut y, mut theta) = if branch == 0 || trail.is_empty() {
            // enter from a random border heading roughly inward
            let side = rng.random_range(0..4u8);
            let (x, y, base) = match side {
                0 => (0.0, rng.random_range(0.0..h as f64), 0.0),
                1 => (w as f64 - 1.0, rng.random_range(0.0..h as f64), std::f64::consts::PI),
                2 => (rng.random_range(0.0..w as f64), 0.0, std::f64::consts::FRAC_PI_2),
                _ => (rng.random_range(0.0..w as f64), h as f64 - 1.0, -std::f64::consts::FRAC_PI_2),
            };
            (x, y, base + rng.random_range(-0.5..0.5))
        } else {
            let (px, py, ptheta) = trail[rng.random_range(0..trail.len())];
            let turn = rng.random_range(0.6..1.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (px, py, ptheta + turn)
        };
        let width_px = rng.random_range(1..=3usize);
        let radius = width_px as f64 / 2.0;
        let steps = rng.random_range((w + h) / 4..=(w + h) / 2);
        for _ in 0..steps {
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                break;
            }
            trail.push((x, y, theta));
            let x0 = ((x - radius).floor().max(0.0)) as usize;
            let x1 = ((x + radius).ceil() as usize).min(w - 1);
            let y0 = ((y - radius).floor().max(0.0)) as usize;
            let y1 = ((y + radius).ceil() as usize).min(h - 1);
            for my in y0..=y1 {
                for mx in x0..=x1 {
                    let dx = mx as f64 - x;
                    let dy = my as f64 - y;
                    if dx * dx + dy * dy <= radius * radius {
                        mask.set(mx, my, 1);
                    }
                }
            }
            theta += rng.random_range(-0.25..0.25);
            x += theta.cos();
            y += theta.sin();
        }
    }

    let mut img = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let bg = 0.35 + 0.08 * texture[y * w + x];
            let base = if mask.get(x, y) == 1 { bg + 0.15 } else { bg };
            let noisy = base + spec.noise_sigma * gauss(&mut rng);
            img.set(x, y, noisy.clamp(0.0, 1.0));
        }
    }
    SamplePair::new(img, mask, format!("vessel_{index:03}"))
}

/// Generate the dataset in memory, deterministically under the seed.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SamplePair>> {
    spec.validate()?;
    Ok((0..spec.n_images)
        .map(|i| match spec.kind {
            SynthKind::Blobs => blob_pair(spec, i),
            SynthKind::Vessels => vessel_pair(spec, i),
        })
        .collect())
}

/// Generate and write the on-disk layout: `dir/images/<id>.png` and
/// `dir/masks/<id>.png`.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<Vec<SamplePair>> {
    let pairs = generate(spec)?;
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)
        .map_err(|e| Error::Io { path: images.clone(), source: e })?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::Io { path: masks.clone(), source: e })?;
    for pair in &pairs {
        save_gray(&pair.image, &images.join(format!("{}.png", pair.id)))?;
        save_mask(&pair.mask, &masks.join(format!("{}.png", pair.id)))?;
    }
    Ok(pairs)
}
