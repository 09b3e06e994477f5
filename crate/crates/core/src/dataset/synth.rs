//! Synthetic frames with soft-edged elliptical bleeding blobs on a mucosa-like background.
//!
//! Pixel colors are drawn per channel from a Gaussian around the class mean; a smooth
//! low-frequency illumination field is added on top. The mask is the union of the
//! ellipse supports, and the color blend weight crosses one half exactly on the
//! ellipse boundary so the mask edge is recoverable from the image.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::colorspace::RgbImage;
use crate::dataset::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlobFraction {
    /// Uniform in `[lo, hi]` per image.
    Uniform(f64, f64),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub fraction: BlobFraction,
    pub max_blobs: usize,
    pub blob_mean: [f64; 3],
    pub blob_sigma: f64,
    pub background_mean: [f64; 3],
    pub background_sigma: f64,
    /// Width in pixels of the soft color transition at blob edges.
    pub edge_px: f64,
    /// Peak amplitude of the smooth illumination field, in 8-bit units.
    pub texture_amplitude: f64,
}

impl SynthConfig {
    pub fn new(width: usize, height: usize) -> Self {
        SynthConfig {
            width,
            height,
            fraction: BlobFraction::Uniform(0.005, 0.08),
            max_blobs: 3,
            blob_mean: [150.0, 30.0, 30.0],
            blob_sigma: 20.0,
            background_mean: [190.0, 130.0, 110.0],
            background_sigma: 25.0,
            edge_px: 1.5,
            texture_amplitude: 12.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub rgb: RgbImage,
    pub mask: BinaryMask,
    /// Blob area fraction the generator aimed for.
    pub requested_fraction: f64,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    semi_major: f64,
    semi_minor: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: `<= 1` inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.semi_major;
        let v = (-dx * self.sin + dy * self.cos) / self.semi_minor;
        (u * u + v * v).sqrt()
    }
}

pub fn synth_generate(n_images: usize, width: usize, height: usize, seed: u64) -> Result<Vec<SynthImage>> {
    synth_generate_with(&SynthConfig::new(width, height), n_images, seed)
}

pub fn synth_generate_with(cfg: &SynthConfig, n_images: usize, seed: u64) -> Result<Vec<SynthImage>> {
    if cfg.width < 32 || cfg.height < 32 {
        return Err(Error::Config(format!(
            "synthetic images must be at least 32x32, got {}x{}",
            cfg.width, cfg.height
        )));
    }
    let (lo, hi) = match cfg.fraction {
        BlobFraction::Uniform(lo, hi) => (lo, hi),
        BlobFraction::Fixed(f) => (f, f),
    };
    if !(0.0..=0.5).contains(&lo) || !(lo..=0.5).contains(&hi) {
        return Err(Error::Config(format!("blob fraction range [{lo}, {hi}] must lie in [0, 0.5]")));
    }
    if cfg.max_blobs == 0 {
        return Err(Error::Config("max_blobs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images).map(|_| generate_one(cfg, lo, hi, &mut rng)).collect()
}

fn place_blobs(cfg: &SynthConfig, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let area = fraction * (cfg.width * cfg.height) as f64;
    if area < 1.0 {
        return Vec::new();
    }
    // Small areas get a single blob so each one stays a few pixels across.
    let max_k = ((area / 40.0) as usize).clamp(1, cfg.max_blobs);
    let k = rng.random_range(1..=max_k);
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();

    let mut blobs: Vec<Ellipse> = Vec::with_capacity(k);
    for w in weights {
        let a_i = area * w / wsum;
        let aspect = rng.random_range(0.55..1.0);
        let semi_major = (a_i / (PI * aspect)).sqrt();
        let semi_minor = semi_major * aspect;
        let theta = rng.random_range(0.0..PI);
        let margin = semi_major + 2.0;
        let (w_img, h_img) = (cfg.width as f64, cfg.height as f64);
        if 2.0 * margin >= w_img.min(h_img) {
            continue;
        }
        for _ in 0..200 {
            let cx = rng.random_range(margin..w_img - margin);
            let cy = rng.random_range(margin..h_img - margin);
            let clear = blobs.iter().all(|b| {
                let d = ((b.cx - cx).powi(2) + (b.cy - cy).powi(2)).sqrt();
                d > b.semi_major + semi_major + 3.0
            });
            if clear {
                blobs.push(Ellipse { cx, cy, semi_major, semi_minor, cos: theta.cos(), sin: theta.sin() });
                break;
            }
        }
    }
    blobs
}

fn generate_one(cfg: &SynthConfig, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<SynthImage> {
    let fraction = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let blobs = place_blobs(cfg, fraction, rng);

    // Low-frequency illumination: a few random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.random_range(0.5..1.5) * cfg.width.max(cfg.height) as f64;
            let dir = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.3..1.0);
            (2.0 * PI * dir.cos() / period, 2.0 * PI * dir.sin() / period, phase, amp)
        })
        .collect();
    let amp_sum: f64 = waves.iter().map(|w| w.3).sum();

    let blob_noise = Normal::new(0.0, cfg.blob_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let bg_noise = Normal::new(0.0, cfg.background_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut pixels = Vec::with_capacity(cfg.width * cfg.height);
    let mut mask = Vec::with_capacity(cfg.width * cfg.height);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (fx, fy) = (x as f64, y as f64);
            let mut alpha: f64 = 0.0;
            let mut inside = false;
            for b in &blobs {
                let r = b.radius(fx, fy);
                inside |= r <= 1.0;
                let dist = (1.0 - r) * b.semi_minor;
                alpha = alpha.max((0.5 + dist / cfg.edge_px).clamp(0.0, 1.0));
            }
            let texture = cfg.texture_amplitude / amp_sum
                * waves.iter().map(|&(kx, ky, ph, a)| a * (kx * fx + ky * fy + ph).sin()).sum::<f64>();
            let mut px = [0u8; 3];
            for c in 0..3 {
                let blob = cfg.blob_mean[c] + blob_noise.sample(rng);
                let bg = cfg.background_mean[c] + bg_noise.sample(rng);
                let v = alpha * blob + (1.0 - alpha) * bg + texture;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            pixels.push(px);
            mask.push(inside as u8);
        }
    }
    Ok(SynthImage {
        rgb: RgbImage::new(cfg.width, cfg.height, pixels)?,
        mask: BinaryMask::new(cfg.width, cfg.height, mask)?,
        requested_fraction: fraction,
    })
}
