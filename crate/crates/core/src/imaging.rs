//! Image ingestion and preprocessing: bilinear resize, template-matching
//! crop and channel replication. Also hosts the synthetic radiograph
//! generator used when no real dataset is available.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{FindingState, LabelRecord, CHEXPERT_POSITIVE_RATE, NUM_FINDINGS};
use crate::numerics::RngStream;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!("image dimensions {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn sub_image(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Domain(format!(
                "window {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for r in top..top + height {
            let start = r * self.width + left;
            pixels.extend_from_slice(&self.pixels[start..start + width]);
        }
        Self::new(width, height, pixels)
    }

    fn variance(&self) -> f64 {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        self.pixels.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n
    }
}

/// Channel-major stack of identical-size planes.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl MultiChannelImage {
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Bilinear resize with pixel-center sampling and edge clamping.
pub fn resize_bilinear(img: &GrayImage, out_width: usize, out_height: usize) -> Result<GrayImage> {
    if out_width == 0 || out_height == 0 {
        return Err(Error::Domain(format!(
            "resize target {out_width}x{out_height}"
        )));
    }
    if out_width == img.width && out_height == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / out_width as f64;
    let sy = img.height as f64 / out_height as f64;
    let axis = |o: usize, scale: f64, len: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..out_width).map(|c| axis(c, sx, img.width)).collect();
    let mut pixels = Vec::with_capacity(out_width * out_height);
    for r in 0..out_height {
        let (r0, r1, fy) = axis(r, sy, img.height);
        for &(c0, c1, fx) in &cols {
            let top = img.get(r0, c0) * (1.0 - fx) + img.get(r0, c1) * fx;
            let bottom = img.get(r1, c0) * (1.0 - fx) + img.get(r1, c1) * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(out_width, out_height, pixels)
}

/// A non-constant matching template.
#[derive(Debug, Clone, PartialEq)]
pub struct Template(GrayImage);

impl Template {
    pub fn new(img: GrayImage) -> Result<Self> {
        if img.variance() <= 0.0 {
            return Err(Error::Domain("template has zero variance".into()));
        }
        Ok(Self(img))
    }

    pub fn image(&self) -> &GrayImage {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropOutcome {
    pub image: GrayImage,
    /// Top-left corner of the best template placement, if any was defined.
    pub placement: Option<(usize, usize)>,
    pub score: Option<f64>,
    /// Set when every placement was degenerate and the center crop was used.
    pub fallback: bool,
}

/// Zero-mean normalized cross-correlation of `tpl` at every placement in
/// `img`, row-major over `(rows - th + 1) x (cols - tw + 1)` positions.
/// Placements whose image window is constant score `None`.
pub fn ncc_scores(img: &GrayImage, tpl: &Template) -> Result<Vec<Option<f64>>> {
    let t = tpl.image();
    let (th, tw) = (t.height, t.width);
    if th >= img.height || tw >= img.width {
        return Err(Error::Domain(format!(
            "template {th}x{tw} must be strictly smaller than image {}x{}",
            img.height, img.width
        )));
    }
    let n = (th * tw) as f64;
    let t_mean = t.pixels.iter().sum::<f64>() / n;
    let centered: Vec<f64> = t.pixels.iter().map(|p| p - t_mean).collect();
    let t_energy = centered.iter().map(|p| p * p).sum::<f64>();

    // Integral images of I and I^2 for per-window statistics.
    let w1 = img.width + 1;
    let mut sum = vec![0.0; (img.height + 1) * w1];
    let mut sq = vec![0.0; (img.height + 1) * w1];
    for r in 0..img.height {
        for c in 0..img.width {
            let p = img.get(r, c);
            let i = (r + 1) * w1 + c + 1;
            sum[i] = p + sum[i - 1] + sum[i - w1] - sum[i - w1 - 1];
            sq[i] = p * p + sq[i - 1] + sq[i - w1] - sq[i - w1 - 1];
        }
    }
    let window = |table: &[f64], r: usize, c: usize| {
        table[(r + th) * w1 + c + tw] - table[r * w1 + c + tw] - table[(r + th) * w1 + c]
            + table[r * w1 + c]
    };

    let rows = img.height - th + 1;
    let cols = img.width - tw + 1;
    let scores = (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            let (r, c) = (idx / cols, idx % cols);
            let s = window(&sum, r, c);
            let energy = window(&sq, r, c) - s * s / n;
            if energy <= 1e-12 * n {
                return None;
            }
            let mut dot = 0.0;
            for tr in 0..th {
                let row = &img.pixels[(r + tr) * img.width + c..(r + tr) * img.width + c + tw];
                let trow = &centered[tr * tw..(tr + 1) * tw];
                dot += row.iter().zip(trow).map(|(a, b)| a * b).sum::<f64>();
            }
            Some(dot / (energy * t_energy).sqrt())
        })
        .collect();
    Ok(scores)
}

/// Crops a `crop_size` square centered on the best NCC match of `tpl`,
/// clamped to the image. Ties go to the smallest row, then column.
pub fn template_match_crop(img: &GrayImage, tpl: &Template, crop_size: usize) -> Result<CropOutcome> {
    if crop_size == 0 || crop_size > img.width || crop_size > img.height {
        return Err(Error::Domain(format!(
            "crop {crop_size} does not fit image {}x{}",
            img.height, img.width
        )));
    }
    let scores = ncc_scores(img, tpl)?;
    let cols = img.width - tpl.image().width + 1;
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    let clamp = |center: usize, len: usize| center.saturating_sub(crop_size / 2).min(len - crop_size);
    match best {
        Some((i, score)) => {
            let (r, c) = (i / cols, i % cols);
            let center_r = r + tpl.image().height / 2;
            let center_c = c + tpl.image().width / 2;
            let top = clamp(center_r, img.height);
            let left = clamp(center_c, img.width);
            Ok(CropOutcome {
                image: img.sub_image(top, left, crop_size, crop_size)?,
                placement: Some((r, c)),
                score: Some(score),
                fallback: false,
            })
        }
        None => Ok(CropOutcome {
            image: center_crop(img, crop_size)?,
            placement: None,
            score: None,
            fallback: true,
        }),
    }
}

pub fn center_crop(img: &GrayImage, crop_size: usize) -> Result<GrayImage> {
    if crop_size == 0 || crop_size > img.width || crop_size > img.height {
        return Err(Error::Domain(format!(
            "crop {crop_size} does not fit image {}x{}",
            img.height, img.width
        )));
    }
    img.sub_image(
        (img.height - crop_size) / 2,
        (img.width - crop_size) / 2,
        crop_size,
        crop_size,
    )
}

pub fn replicate_channels(img: &GrayImage, channels: usize) -> Result<MultiChannelImage> {
    if channels == 0 {
        return Err(Error::Domain("channel count must be at least 1".into()));
    }
    let mut data = Vec::with_capacity(img.pixels.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&img.pixels);
    }
    Ok(MultiChannelImage {
        channels,
        width: img.width,
        height: img.height,
        data,
    })
}

/// Pixel-wise mean of equally sized images.
pub fn mean_image(images: &[GrayImage]) -> Result<GrayImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::Domain("mean of zero images".into()))?;
    let mut acc = vec![0.0; first.pixels.len()];
    for img in images {
        if img.width != first.width || img.height != first.height {
            return Err(Error::Shape("images differ in size".into()));
        }
        for (a, p) in acc.iter_mut().zip(&img.pixels) {
            *a += p;
        }
    }
    let n = images.len() as f64;
    GrayImage::new(
        first.width,
        first.height,
        acc.into_iter().map(|a| (a / n).clamp(0.0, 1.0)).collect(),
    )
}

/// Loads 8- or 16-bit grayscale PNG (or PGM), scaling by the bit-depth maximum.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let dynamic = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (width, height) = (dynamic.width() as usize, dynamic.height() as usize);
    let pixels: Vec<f64> = match dynamic {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|p| p as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|p| p as f64 / 65535.0)
            .collect(),
        other => other
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|p| p as f64 / 65535.0)
            .collect(),
    };
    GrayImage::new(width, height, pixels)
}

fn quantize16(p: f64) -> u16 {
    (p.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a 16-bit grayscale PNG.
pub fn save_png16(img: &GrayImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.pixels.iter().map(|&p| quantize16(p)).collect(),
    )
    .ok_or_else(|| Error::Shape("pixel buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes an 8-bit grayscale image; the format follows the extension.
pub fn save_gray8(img: &GrayImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    )
    .ok_or_else(|| Error::Shape("pixel buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Round-trips `img` through 16-bit quantization, matching what a PNG
/// written by [`save_png16`] reads back as.
pub fn quantize_to_png16(img: &GrayImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img
            .pixels
            .iter()
            .map(|&p| quantize16(p) as f64 / 65535.0)
            .collect(),
    }
}

/// Parameters of the synthetic radiograph generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Probability that each finding is present.
    pub marginals: [f64; NUM_FINDINGS],
    /// Findings that stamp a visible pattern when present.
    pub informative: [bool; NUM_FINDINGS],
    pub image_size: usize,
    pub noise_level: f64,
    pub amplitude: f64,
    /// Fraction of present findings whose label is reported as uncertain.
    pub uncertain_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn chexpert(image_size: usize, seed: u64) -> Self {
        Self {
            marginals: CHEXPERT_POSITIVE_RATE,
            informative: [true; NUM_FINDINGS],
            image_size,
            noise_level: 0.1,
            amplitude: 0.45,
            uncertain_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::Config(format!(
                "synthetic image size {} too small",
                self.image_size
            )));
        }
        if self.marginals.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("synthetic marginals must lie in [0, 1]".into()));
        }
        if !(self.noise_level >= 0.0) || !(self.amplitude > 0.0) {
            return Err(Error::Config("noise must be >= 0 and amplitude > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.uncertain_fraction) {
            return Err(Error::Config("uncertain fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Center `(row, col)` and width of the pattern for `class`; patterns sit
    /// on a 4x4 grid of cells so they do not overlap.
    pub fn pattern_geometry(&self, class: usize) -> (f64, f64, f64) {
        let cell = self.image_size as f64 / 4.0;
        let (gr, gc) = (class / 4, class % 4);
        let sigma = cell / 4.0 * (1.0 + 0.2 * (class % 3) as f64);
        ((gr as f64 + 0.5) * cell, (gc as f64 + 0.5) * cell, sigma)
    }

    fn background(&self, r: usize, c: usize) -> f64 {
        let half = self.image_size as f64 / 2.0;
        let dr = (r as f64 + 0.5 - half) / half;
        let dc = (c as f64 + 0.5 - half) / half;
        0.2 + 0.15 * (1.0 - (dr * dr + dc * dc).sqrt() / std::f64::consts::SQRT_2)
    }

    /// Noise-free rendering of a given set of present findings.
    pub fn render(&self, present: &[bool; NUM_FINDINGS]) -> Vec<f64> {
        let n = self.image_size;
        let mut pixels = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let mut v = self.background(r, c);
                for k in 0..NUM_FINDINGS {
                    if present[k] && self.informative[k] {
                        let (cr, cc, sigma) = self.pattern_geometry(k);
                        let d2 = (r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2);
                        v += self.amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
                pixels.push(v);
            }
        }
        pixels
    }

    fn sample_one(&self, index: usize) -> (GrayImage, LabelRecord) {
        let mut rng = RngStream::new(self.seed, 0).split(index as u64);
        let mut present = [false; NUM_FINDINGS];
        let mut findings = [FindingState::Negative; NUM_FINDINGS];
        for k in 0..NUM_FINDINGS {
            present[k] = rng.unit() < self.marginals[k];
            let reported_uncertain = rng.unit() < self.uncertain_fraction;
            findings[k] = match (present[k], reported_uncertain) {
                (true, true) => FindingState::Uncertain,
                (true, false) => FindingState::Positive,
                (false, _) => FindingState::Negative,
            };
        }
        let mut pixels = self.render(&present);
        if self.noise_level > 0.0 {
            for p in pixels.iter_mut() {
                *p += self.noise_level * rng.normal();
            }
        }
        for p in pixels.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
        let image = GrayImage {
            width: self.image_size,
            height: self.image_size,
            pixels,
        };
        (image, LabelRecord::new(format!("img_{index:06}.png"), findings))
    }
}

/// Draws `n` labelled synthetic images. Image `i` depends only on the seed
/// and `i`, so generation is order- and thread-count independent.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    n: usize,
) -> Result<(Vec<GrayImage>, Vec<LabelRecord>)> {
    if n == 0 {
        return Err(Error::Domain("synthetic dataset size must be positive".into()));
    }
    spec.validate()?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| spec.sample_one(i))
        .unzip())
}
