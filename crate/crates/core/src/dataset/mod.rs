//! Images, masks, labeled patches and the synthetic data generator.

pub mod patches;
pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::colorspace::{extract_channels, ChannelId, ChannelImage, RgbImage};
use crate::error::{Error, Result};

pub use patches::{
    balance, balanced_indices, extract_patches, sample_balanced, Border, ClassRatio, PatchSet,
    PatchSource,
};
pub use pnm::{load_image, load_mask};
pub use synth::{synth_generate, synth_generate_with, BlobFraction, SynthConfig, SynthImage};

/// Binary ground-truth plane, 1 = bleeding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask has {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask { width, height, data: vec![0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.positives() as f64 / self.data.len() as f64
    }
}

/// Channel stack with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    channels: ChannelImage,
    mask: BinaryMask,
}

impl LabeledImage {
    pub fn new(channels: ChannelImage, mask: BinaryMask) -> Result<Self> {
        if channels.width() != mask.width() || channels.height() != mask.height() {
            return Err(Error::Shape(format!(
                "mask is {}x{} but channels are {}x{}",
                mask.width(),
                mask.height(),
                channels.width(),
                channels.height()
            )));
        }
        Ok(LabeledImage { channels, mask })
    }

    pub fn from_rgb(rgb: &RgbImage, mask: BinaryMask, ids: &[ChannelId]) -> Result<Self> {
        LabeledImage::new(extract_channels(rgb, ids)?, mask)
    }

    pub fn channels(&self) -> &ChannelImage {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut ChannelImage {
        &mut self.channels
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
}

/// One frame on disk: `NAME.ppm` with its mask `NAME_mask.pgm`.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub name: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

pub const MASK_SUFFIX: &str = "_mask.pgm";

pub fn mask_path_for(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    image.with_file_name(format!("{stem}{MASK_SUFFIX}"))
}

/// Loads every `*.ppm` in `dir` (sorted by file name) together with its mask.
pub fn load_dir(dir: &Path) -> Result<Vec<RawSample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .ppm images in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let image = load_image(&path).map_err(|e| with_path(e, &path))?;
        let mask_path = mask_path_for(&path);
        let mask = load_mask(&mask_path).map_err(|e| with_path(e, &mask_path))?;
        if mask.width() != image.width() || mask.height() != image.height() {
            return Err(Error::Shape(format!("{} does not match its image", mask_path.display())));
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.push(RawSample { name, image, mask });
    }
    let (pos, total) = class_counts(out.iter().map(|s| &s.mask));
    log::info!(
        "loaded {} images from {}: {:.3}% bleeding pixels ({pos} of {total})",
        out.len(),
        dir.display(),
        100.0 * pos as f64 / total.max(1) as f64
    );
    Ok(out)
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Parse { offset, message } => {
            Error::Parse { offset, message: format!("{}: {message}", path.display()) }
        }
        Error::Io(e) => Error::Data(format!("{}: {e}", path.display())),
        other => other,
    }
}

pub fn save_sample(dir: &Path, name: &str, image: &RgbImage, mask: &BinaryMask) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    pnm::write_file(&dir.join(format!("{name}.ppm")), &pnm::encode_ppm(image))?;
    pnm::write_file(&dir.join(format!("{name}{MASK_SUFFIX}")), &pnm::encode_mask(mask))?;
    Ok(())
}

/// `(positive pixels, total pixels)` across masks.
pub fn class_counts<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> (usize, usize) {
    masks.into_iter().fold((0, 0), |(p, t), m| (p + m.positives(), t + m.data().len()))
}

/// Image-level split: indices shuffled with `seed`, first `ceil(fraction * n)` train.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    // Tolerate representation error so that e.g. 50/60 of 60 gives 50, not 51.
    let n_train = (train_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    split_by_count(n, n_train.min(n), seed)
}

/// Shuffles `0..n` with `seed` and takes the first `n_train` as the training split.
pub fn split_by_count(n: usize, n_train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17);
    idx.shuffle(&mut rng);
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}
