//! Training and evaluation on whole labeled frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colorspace::ChannelId;
use crate::compress::{train_compressed, LayerPolicy, QuantConfig};
use crate::compress::{AlphaSchedule, CompressReport};
use crate::dataset::{sample_balanced, Border, ClassRatio, LabeledImage, PatchSet, RawSample, SynthImage};
use crate::error::{Error, Result};
use crate::inference::FrozenNet;
use crate::metrics::{confusion, roc_auc, ConfusionCounts, MetricsReport, RocCurve};
use crate::nn::{
    cnn_spec_with, mlp_spec_for, AdamConfig, InputNorm, InputShape, LayerSpec, Network, NetworkSpec, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "cnn" => Ok(Arch::Cnn),
            _ => Err(Error::Config(format!("unknown arch {s:?} (expected mlp or cnn)"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    None,
    /// Every layer binarized.
    Quantize,
    /// Convolutions pruned, dense layers binarized. MLPs have no convolutions, so
    /// this is the same as `Quantize` for them.
    PruneQuantize,
}

impl FromStr for Compression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Compression::None),
            "quantize" => Ok(Compression::Quantize),
            "prune_quantize" => Ok(Compression::PruneQuantize),
            _ => Err(Error::Config(format!(
                "unknown compression {s:?} (expected none, quantize or prune_quantize)"
            ))),
        }
    }
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Compression::None => "none",
            Compression::Quantize => "quantize",
            Compression::PruneQuantize => "prune_quantize",
        })
    }
}

/// Pruning rate used when none is given.
pub const DEFAULT_ALPHA: f64 = 0.75;

/// Per-epoch learning-rate factor used when none is given.
pub const DEFAULT_LR_DECAY: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub arch: Arch,
    pub compression: Compression,
    pub alpha: f64,
    pub channels: Vec<ChannelId>,
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub dropout: f32,
    pub ratio: ClassRatio,
    /// Balanced training patches drawn from the frames.
    pub samples: usize,
    pub border: Border,
    /// Z-score the input channels with statistics of the training patches.
    pub normalize: bool,
    pub quant: QuantConfig,
    pub seed: u64,
}

impl TrainSettings {
    /// MLP: 1:1 over 500,000 patches. CNN: 1:3 over 600,000 patches.
    pub fn new(arch: Arch, compression: Compression) -> Self {
        let (ratio, samples) = match arch {
            Arch::Mlp => (ClassRatio { positive: 1, negative: 1 }, 500_000),
            Arch::Cnn => (ClassRatio { positive: 1, negative: 3 }, 600_000),
        };
        TrainSettings {
            arch,
            compression,
            alpha: DEFAULT_ALPHA,
            channels: vec![ChannelId::A, ChannelId::G, ChannelId::S],
            patch_size: 9,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            lr_decay: DEFAULT_LR_DECAY,
            dropout: 0.5,
            ratio,
            samples,
            border: Border::Reflect,
            normalize: true,
            quant: QuantConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("at least one channel is needed".into()));
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::Config(format!("patch size must be odd, got {}", self.patch_size)));
        }
        if self.epochs == 0 || self.batch_size < 2 || self.samples < 2 {
            return Err(Error::Config("epochs, batch size and samples must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) || !(self.alpha >= 0.0) {
            return Err(Error::Config("lr must be positive, dropout in [0, 1), alpha non-negative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay must be in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let input = InputShape { channels: self.channels.len(), height: self.patch_size, width: self.patch_size };
        Ok(match self.arch {
            Arch::Mlp => mlp_spec_for(input),
            Arch::Cnn => cnn_spec_with(input, self.dropout),
        })
    }

    fn policies(&self, spec: &NetworkSpec) -> Vec<LayerPolicy> {
        spec.layers
            .iter()
            .filter(|l| l.is_weighted())
            .map(|l| match (self.compression, l) {
                (Compression::None, _) => LayerPolicy::Full,
                (Compression::PruneQuantize, LayerSpec::Conv { .. }) => LayerPolicy::Prune,
                _ => LayerPolicy::Quantize,
            })
            .collect()
    }
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMeta {
    pub arch: Arch,
    pub compression: Compression,
    pub alpha: Option<f64>,
    pub channels: Vec<ChannelId>,
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub ratio: String,
    pub samples: usize,
    pub normalize: bool,
    pub quant: QuantConfig,
    pub seed: u64,
    /// Per weighted layer: `(survivors, total)` after training.
    pub survivors: Vec<(usize, usize)>,
}

impl PipelineMeta {
    /// Metadata for a network that was not produced by [`train_on_images`].
    pub fn untrained(arch: Arch, channels: Vec<ChannelId>, patch_size: usize, seed: u64) -> Self {
        let s = TrainSettings { channels, patch_size, seed, ..TrainSettings::new(arch, Compression::None) };
        PipelineMeta::from_settings(&s, Vec::new())
    }

    fn from_settings(s: &TrainSettings, survivors: Vec<(usize, usize)>) -> Self {
        PipelineMeta {
            arch: s.arch,
            compression: s.compression,
            alpha: (s.compression == Compression::PruneQuantize && s.arch == Arch::Cnn).then_some(s.alpha),
            channels: s.channels.clone(),
            patch_size: s.patch_size,
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            lr_decay: s.lr_decay,
            ratio: s.ratio.to_string(),
            samples: s.samples,
            normalize: s.normalize,
            quant: s.quant,
            seed: s.seed,
            survivors,
        }
    }
}

/// Converts raw frames to the requested channels.
pub fn prepare(samples: &[RawSample], channels: &[ChannelId]) -> Result<Vec<LabeledImage>> {
    samples.iter().map(|s| LabeledImage::from_rgb(&s.image, s.mask.clone(), channels)).collect()
}

/// Converts generated frames to the requested channels.
pub fn prepare_synth(images: &[SynthImage], channels: &[ChannelId]) -> Result<Vec<LabeledImage>> {
    images.iter().map(|s| LabeledImage::from_rgb(&s.rgb, s.mask.clone(), channels)).collect()
}

/// Per-channel mean and reciprocal standard deviation over every patch value.
pub fn fit_input_norm(ps: &PatchSet) -> InputNorm<f32> {
    let c = ps.channel_ids().len();
    let plane = ps.patch_size() * ps.patch_size();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for i in 0..ps.len() {
        for (ch, values) in ps.patch(i).chunks_exact(plane).enumerate() {
            for &v in values {
                sum[ch] += v as f64;
                sq[ch] += v as f64 * v as f64;
            }
        }
    }
    let n = (ps.len() * plane).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let sd = (q / n - m * m).max(0.0).sqrt();
            if sd > 1e-6 { (1.0 / sd) as f32 } else { 1.0 }
        })
        .collect();
    InputNorm { mean: mean.iter().map(|&m| m as f32).collect(), scale }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network<f32>,
    pub meta: PipelineMeta,
    pub report: CompressReport,
}

impl TrainOutcome {
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut l = self.report.warmup.epoch_losses.clone();
        l.extend(&self.report.compressed.epoch_losses);
        l
    }
}

/// Samples balanced patches from `images` and trains the configured network.
pub fn train_on_images(images: &[LabeledImage], s: &TrainSettings) -> Result<TrainOutcome> {
    s.validate()?;
    for img in images {
        if img.channels().ids() != s.channels {
            return Err(Error::Shape("image channels differ from the configured channels".into()));
        }
    }
    let data = sample_balanced(images, s.patch_size, s.border, s.ratio, s.samples, s.seed ^ 0x5A3B_1E55)?;
    log::info!("sampled {} patches at {} (pos:neg)", data.len(), s.ratio);
    train_on_patches(&data, s)
}

/// Trains on an already sampled patch set.
pub fn train_on_patches(data: &PatchSet, s: &TrainSettings) -> Result<TrainOutcome> {
    s.validate()?;
    if data.channel_ids() != s.channels || data.patch_size() != s.patch_size {
        return Err(Error::Shape("patch set does not match the configured input".into()));
    }
    let spec = s.network_spec()?;
    let policies = s.policies(&spec);
    let mut net = Network::<f32>::new(spec, s.seed)?;
    if s.normalize {
        net.set_input_norm(fit_input_norm(data))?;
    }
    let cfg = TrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        adam: AdamConfig { lr: s.lr, ..AdamConfig::default() },
        seed: s.seed.wrapping_add(1),
        first_epoch: 0,
        lr_decay: s.lr_decay,
    };
    let alpha = policies.contains(&LayerPolicy::Prune).then_some(AlphaSchedule::Constant(s.alpha));
    let report = train_compressed(&mut net, data, &cfg, &s.quant, &policies, alpha)?;
    let meta = PipelineMeta::from_settings(s, report.survivors.clone());
    Ok(TrainOutcome { net, meta, report })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub per_image: Vec<ConfusionCounts>,
    /// Pooled over every test pixel; `None` when the ground truth has a single class.
    pub roc: Option<RocCurve>,
    pub report: MetricsReport,
}

/// Segments every image and pools the confusion counts and scores.
pub fn evaluate(net: &FrozenNet, images: &[LabeledImage]) -> Result<Evaluation> {
    let mut counts = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(images.len());
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for img in images {
        let (prob, pred) = net.segment(img.channels())?;
        let c = confusion(&pred, img.mask())?;
        counts.merge(&c);
        per_image.push(c);
        scores.extend_from_slice(&prob);
        truth.extend_from_slice(img.mask().data());
    }
    let roc = match roc_auc(&scores, &truth) {
        Ok(r) => Some(r),
        Err(Error::Data(_)) => None,
        Err(e) => return Err(e),
    };
    let report = MetricsReport::new(&counts, roc.as_ref(), images.len());
    Ok(Evaluation { counts, per_image, roc, report })
}
