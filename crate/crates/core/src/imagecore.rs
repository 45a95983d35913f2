//! Image and mask representation, decoding/encoding, grayscale conversion,
//! zero-padding and resizing.
//!
//! Intensities are stored as `f64` in `[0, 1]`; quantization to 8 bits only
//! happens at the file boundary. Masks store raw class ids (`u8`), one per
//! pixel, and track the number of classes.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};

/// Single-channel intensity image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "data length must equal width*height");
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)), "intensity out of [0,1]");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at sub-pixel coordinates; out-of-bounds neighbors
    /// contribute 0.
    pub fn sample_bilinear_zero(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let sx = x0 as i64 + dx;
                let sy = y0 as i64 + dy;
                if sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height {
                    acc += wx * wy * self.get(sx as usize, sy as usize);
                }
            }
        }
        acc
    }
}

/// Row-major mask of class ids aligned with a [`GrayImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    pub n_classes: usize,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, n_classes: usize) -> Self {
        assert!(n_classes >= 2, "a mask needs at least two classes");
        Self { width, height, data: vec![0; width * height], n_classes }
    }

    pub fn from_vec(width: usize, height: usize, n_classes: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "data length must equal width*height");
        assert!(n_classes >= 2, "a mask needs at least two classes");
        assert!(
            data.iter().all(|&c| (c as usize) < n_classes),
            "class id out of range"
        );
        Self { width, height, data, n_classes }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: u8) {
        debug_assert!((c as usize) < self.n_classes);
        self.data[y * self.width + x] = c;
    }

    /// Nearest-neighbor sample; out of bounds yields class 0.
    pub fn sample_nearest_zero(&self, x: f64, y: f64) -> u8 {
        let sx = (x + 0.5).floor() as i64;
        let sy = (y + 0.5).floor() as i64;
        if sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height {
            self.get(sx as usize, sy as usize)
        } else {
            0
        }
    }
}

/// RGB image at the I/O boundary, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn from_vec(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }
}

/// Decode a PNG or PGM/PPM file into an [`RgbImage`], normalizing channels
/// to `[0, 1]` by the channel maximum (255 or 65535).
pub fn load_image(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let decoded = reader.decode().map_err(|e| Error::CorruptImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<[f64; 3]> = match decoded {
        DynamicImage::ImageLuma8(buf) => {
            buf.pixels().map(|p| { let v = p.0[0] as f64 / 255.0; [v, v, v] }).collect()
        }
        DynamicImage::ImageLuma16(buf) => {
            buf.pixels().map(|p| { let v = p.0[0] as f64 / 65535.0; [v, v, v] }).collect()
        }
        DynamicImage::ImageLumaA8(buf) => {
            buf.pixels().map(|p| { let v = p.0[0] as f64 / 255.0; [v, v, v] }).collect()
        }
        DynamicImage::ImageRgb8(buf) => {
            buf.pixels()
                .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
                .collect()
        }
        DynamicImage::ImageRgb16(buf) => {
            buf.pixels()
                .map(|p| {
                    [p.0[0] as f64 / 65535.0, p.0[1] as f64 / 65535.0, p.0[2] as f64 / 65535.0]
                })
                .collect()
        }
        DynamicImage::ImageRgba8(buf) => {
            buf.pixels()
                .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
                .collect()
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{:?} pixel layout in {}",
                other.color(),
                path.display()
            )))
        }
    };
    Ok(RgbImage { width, height, data })
}

/// Decode a mask file: 8-bit single channel (or RGB with equal channels)
/// where the raw pixel value is the class id.
pub fn load_mask(path: &Path, n_classes: Option<usize>) -> Result<LabelMask> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?
        .decode()
        .map_err(|e| Error::CorruptImage { path: path.to_path_buf(), reason: e.to_string() })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<u8> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "mask must be 8-bit, got {:?} in {}",
                other.color(),
                path.display()
            )))
        }
    };
    let max = data.iter().copied().max().unwrap_or(0) as usize;
    let n_classes = n_classes.unwrap_or(0).max(max + 1).max(2);
    Ok(LabelMask { width, height, data, n_classes })
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an 8-bit grayscale image as PNG or PGM (chosen by extension).
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(
        img.width as u32,
        img.height as u32,
        |x, y| Luma([quantize8(img.get(x as usize, y as usize))]),
    );
    buf.save(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

/// Write an 8-bit RGB image as PNG or PPM (chosen by extension).
pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
            let p = img.data[y as usize * img.width + x as usize];
            Rgb([quantize8(p[0]), quantize8(p[1]), quantize8(p[2])])
        });
    buf.save(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

/// Write a mask as an 8-bit single-channel image, pixel value = class id.
pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(
        mask.width as u32,
        mask.height as u32,
        |x, y| Luma([mask.get(x as usize, y as usize)]),
    );
    buf.save(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

/// BT.601 luma conversion: gray = 0.299 r + 0.587 g + 0.114 b.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let data = img
        .data
        .iter()
        .map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// Pad an image to `target_w x target_h`, original anchored top-left,
/// new cells set to `fill`.
pub fn pad_to(img: &GrayImage, target_w: usize, target_h: usize, fill: f64) -> Result<GrayImage> {
    if target_w < img.width || target_h < img.height {
        return Err(Error::TargetSmallerThanSource {
            src_w: img.width,
            src_h: img.height,
            target_w,
            target_h,
        });
    }
    let mut out = vec![fill; target_w * target_h];
    for y in 0..img.height {
        let src = &img.data[y * img.width..(y + 1) * img.width];
        out[y * target_w..y * target_w + img.width].copy_from_slice(src);
    }
    Ok(GrayImage { width: target_w, height: target_h, data: out })
}

/// Mask counterpart of [`pad_to`]; new cells hold `fill_class`.
pub fn pad_mask_to(
    mask: &LabelMask,
    target_w: usize,
    target_h: usize,
    fill_class: u8,
) -> Result<LabelMask> {
    if target_w < mask.width || target_h < mask.height {
        return Err(Error::TargetSmallerThanSource {
            src_w: mask.width,
            src_h: mask.height,
            target_w,
            target_h,
        });
    }
    debug_assert!((fill_class as usize) < mask.n_classes);
    let mut out = vec![fill_class; target_w * target_h];
    for y in 0..mask.height {
        let src = &mask.data[y * mask.width..(y + 1) * mask.width];
        out[y * target_w..y * target_w + mask.width].copy_from_slice(src);
    }
    Ok(LabelMask { width: target_w, height: target_h, data: out, n_classes: mask.n_classes })
}

/// Crop the top-left `w x h` region.
pub fn crop_top_left(img: &GrayImage, w: usize, h: usize) -> GrayImage {
    assert!(w <= img.width && h <= img.height);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        data.extend_from_slice(&img.data[y * img.width..y * img.width + w]);
    }
    GrayImage { width: w, height: h, data }
}

/// Map a destination index to the source coordinate using half-pixel
/// centers: src = (dst + 0.5) * scale - 0.5, clamped to the valid range.
#[inline]
fn src_coord(dst: usize, scale: f64, src_len: usize) -> f64 {
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}

/// Bilinear resize with half-pixel-center coordinate mapping.
pub fn resize_bilinear(img: &GrayImage, w: usize, h: usize) -> GrayImage {
    assert!(w >= 1 && h >= 1);
    if w == img.width && h == img.height {
        return img.clone();
    }
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = src_coord(y, sy, img.height);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..w {
            let fx = src_coord(x, sx, img.width);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let top = img.get(x0, y0) * (1.0 - wx) + img.get(x1, y0) * wx;
            let bot = img.get(x0, y1) * (1.0 - wx) + img.get(x1, y1) * wx;
            data.push(top * (1.0 - wy) + bot * wy);
        }
    }
    GrayImage { width: w, height: h, data }
}

/// Nearest-neighbor resize for masks; class ids stay categorical.
pub fn resize_nearest(mask: &LabelMask, w: usize, h: usize) -> LabelMask {
    assert!(w >= 1 && h >= 1);
    if w == mask.width && h == mask.height {
        return mask.clone();
    }
    let sx = mask.width as f64 / w as f64;
    let sy = mask.height as f64 / h as f64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = src_coord(y, sy, mask.height);
        let iy = (fy + 0.5).floor() as usize;
        let iy = iy.min(mask.height - 1);
        for x in 0..w {
            let fx = src_coord(x, sx, mask.width);
            let ix = (fx + 0.5).floor() as usize;
            let ix = ix.min(mask.width - 1);
            data.push(mask.get(ix, iy));
        }
    }
    LabelMask { width: w, height: h, data, n_classes: mask.n_classes }
}
