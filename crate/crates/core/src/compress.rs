//! Weight binarization, magnitude pruning and the two compressed training schedules:
//! binarized training of the MLP, and the CNN schedule that prunes convolution
//! layers while binarizing the fully connected ones.
//!
//! Quantized layers keep real-valued shadow weights. The forward pass uses their
//! binarized image and the optimizer applies the resulting gradient to the shadow
//! copy unchanged (straight-through).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PatchSet;
use crate::error::{Error, Result};
use crate::nn::{train, LayerSpec, LayerState, Network, NoHooks, Real, TrainConfig, TrainHooks, TrainReport};

/// `+1` where `w >= 0`, `-1` elsewhere.
pub fn binarize_det<T: Real>(w: &[T]) -> Result<Vec<T>> {
    w.iter()
        .map(|&v| {
            if v.is_nan() {
                Err(Error::Numeric("cannot binarize NaN".into()))
            } else if v >= T::zero() {
                Ok(T::one())
            } else {
                Ok(-T::one())
            }
        })
        .collect()
}

/// `clip((x + 1) / 2, 0, 1)`.
pub fn hard_sigmoid(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// `+1` with probability `hard_sigmoid(w)`, else `-1`.
pub fn binarize_stoch<T: Real, R: Rng + ?Sized>(w: &[T], rng: &mut R) -> Result<Vec<T>> {
    w.iter()
        .map(|&v| {
            if v.is_nan() {
                return Err(Error::Numeric("cannot binarize NaN".into()));
            }
            let p = hard_sigmoid(v.as_f64());
            Ok(if rng.random::<f64>() < p { T::one() } else { -T::one() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    /// 1 = kept, 0 = pruned.
    pub mask: Vec<u8>,
    pub alpha: f64,
    /// `alpha · σ(W)`; weights with smaller magnitude are pruned.
    pub threshold: f64,
}

impl PruneMask {
    pub fn survivors(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.survivors() as f64 / self.mask.len().max(1) as f64
    }
}

/// Population standard deviation.
pub fn std_dev<T: Real>(w: &[T]) -> f64 {
    let n = w.len() as f64;
    if w.is_empty() {
        return 0.0;
    }
    let mean = w.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    (w.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Prunes every weight with `|w| < alpha · σ(W)`.
pub fn compute_mask<T: Real>(w: &[T], alpha: f64) -> Result<PruneMask> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("pruning rate must be non-negative, got {alpha}")));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot prune non-finite weights".into()));
    }
    let threshold = alpha * std_dev(w);
    let mask = w.iter().map(|v| (v.as_f64().abs() >= threshold) as u8).collect();
    Ok(PruneMask { mask, alpha, threshold })
}

/// Plain gradient step restricted to kept weights: `W − lr·(grad ⊙ mask)`, with
/// pruned positions forced to zero.
pub fn masked_update<T: Real>(w: &mut [T], grad: &[T], mask: &[u8], lr: T) -> Result<()> {
    if grad.len() != w.len() || mask.len() != w.len() {
        return Err(Error::Shape("weights, gradient and mask lengths differ".into()));
    }
    for ((v, &g), &m) in w.iter_mut().zip(grad).zip(mask) {
        if m == 0 {
            *v = T::zero();
        } else {
            *v -= lr * g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMode {
    Deterministic,
    /// Stochastic signs during training; the final weights use the deterministic sign.
    Stochastic,
}

/// When the binarized weights are re-derived from the shadow weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantSchedule {
    /// After every optimizer step.
    PerBatch,
    /// Once at the start of every epoch, held fixed during it.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub mode: QuantMode,
    pub schedule: QuantSchedule,
    /// Clip shadow weights of quantized layers to `[-1, 1]` after each update.
    pub shadow_clip: bool,
    /// Full-precision epochs before compression starts.
    pub warmup_epochs: usize,
    /// Keep dropout active behind binarized layers during the compressed epochs.
    /// Off by default: with ±1 weights the rescaled dropout noise swamps the signal.
    pub dropout_on_binarized: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            mode: QuantMode::Deterministic,
            schedule: QuantSchedule::PerBatch,
            shadow_clip: true,
            warmup_epochs: 5,
            dropout_on_binarized: false,
        }
    }
}

/// Pruning rate over the compressed epochs. `Linear` recomputes the masks at the end
/// of every epoch; previously pruned weights stay pruned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaSchedule {
    Constant(f64),
    Linear { start: f64, end: f64 },
}

impl AlphaSchedule {
    /// Rate for compressed epoch `i` of `n`.
    pub fn at(&self, i: usize, n: usize) -> f64 {
        match *self {
            AlphaSchedule::Constant(a) => a,
            AlphaSchedule::Linear { start, end } => {
                if n <= 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (n - 1) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerPolicy {
    Full,
    Quantize,
    Prune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressReport {
    pub warmup: TrainReport,
    pub compressed: TrainReport,
    /// Per weighted layer: `(survivors, total)`.
    pub survivors: Vec<(usize, usize)>,
}

struct CompressHooks {
    quant: QuantConfig,
    alpha: Option<AlphaSchedule>,
    first_compressed_epoch: usize,
    compressed_epochs: usize,
}

impl CompressHooks {
    fn quantize<T: Real>(&self, net: &mut Network<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for w in net.layers.iter_mut().filter_map(LayerState::weights_mut).filter(|w| w.quantized) {
            match self.quant.mode {
                QuantMode::Deterministic => w.refresh_effective(),
                QuantMode::Stochastic => w.effective = binarize_stoch(&w.shadow, rng)?,
            }
        }
        Ok(())
    }
}

impl<T: Real> TrainHooks<T> for CompressHooks {
    fn on_epoch_start(&mut self, _epoch: usize, net: &mut Network<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.quant.schedule == QuantSchedule::PerEpoch {
            self.quantize(net, rng)?;
        }
        Ok(())
    }

    fn before_step(&mut self, net: &mut Network<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.quant.schedule == QuantSchedule::PerBatch && self.quant.mode == QuantMode::Stochastic {
            self.quantize(net, rng)?;
        }
        Ok(())
    }

    fn after_step(&mut self, net: &mut Network<T>, _rng: &mut ChaCha8Rng) -> Result<()> {
        let per_batch = self.quant.schedule == QuantSchedule::PerBatch;
        for w in net.layers.iter_mut().filter_map(LayerState::weights_mut) {
            if w.quantized {
                if self.quant.shadow_clip {
                    clip_unit(&mut w.shadow);
                }
                if per_batch && self.quant.mode == QuantMode::Deterministic {
                    w.refresh_effective();
                }
            } else {
                w.refresh_effective();
            }
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, _loss: f64, net: &mut Network<T>) -> Result<()> {
        if let Some(sched @ AlphaSchedule::Linear { .. }) = self.alpha {
            let i = epoch - self.first_compressed_epoch;
            if i + 1 < self.compressed_epochs {
                let alpha = sched.at(i + 1, self.compressed_epochs);
                for w in net.layers.iter_mut().filter_map(LayerState::weights_mut) {
                    if w.mask.is_some() {
                        let m = compute_mask(&w.shadow, alpha)?;
                        w.set_mask(m.mask)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn clip_unit<T: Real>(w: &mut [T]) {
    for v in w {
        *v = v.max(-T::one()).min(T::one());
    }
}

/// Specs of the dense and convolution layers, in network order.
pub fn weighted_layer_kinds<T: Real>(net: &Network<T>) -> Vec<LayerSpec> {
    net.spec().layers.iter().filter(|l| l.is_weighted()).copied().collect()
}

/// Warmup, then compression per `policies` (one per dense/conv layer), then
/// `cfg.epochs − warmup` compressed epochs. With no compressed epochs left the
/// network is returned exactly as plain training leaves it.
pub fn train_compressed<T: Real>(
    net: &mut Network<T>,
    data: &PatchSet,
    cfg: &TrainConfig,
    quant: &QuantConfig,
    policies: &[LayerPolicy],
    alpha: Option<AlphaSchedule>,
) -> Result<CompressReport> {
    let weighted = weighted_layer_kinds(net).len();
    if policies.len() != weighted {
        return Err(Error::Config(format!("{} layer policies for {weighted} weighted layers", policies.len())));
    }
    if policies.contains(&LayerPolicy::Prune) && alpha.is_none() {
        return Err(Error::Config("pruning needs a pruning rate".into()));
    }
    if let Some(a) = alpha {
        for v in [a.at(0, 2), a.at(1, 2)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("pruning rate must be non-negative, got {v}")));
            }
        }
    }
    let warm = quant.warmup_epochs.min(cfg.epochs);
    let rest = cfg.epochs - warm;
    let warm_cfg = TrainConfig { epochs: warm, ..cfg.clone() };
    let warmup = train(net, data, &warm_cfg, &mut NoHooks)?;
    if rest == 0 {
        let survivors = survivor_counts(net);
        return Ok(CompressReport { warmup, compressed: TrainReport::default(), survivors });
    }

    let alpha0 = alpha.map(|a| a.at(0, rest));
    let mut policy = policies.iter();
    for w in net.layers.iter_mut().filter_map(LayerState::weights_mut) {
        match policy.next().expect("policy count checked") {
            LayerPolicy::Full => {}
            LayerPolicy::Quantize => {
                w.quantized = true;
                if quant.shadow_clip {
                    clip_unit(&mut w.shadow);
                }
                w.refresh_effective();
            }
            LayerPolicy::Prune => {
                let m = compute_mask(&w.shadow, alpha0.expect("alpha checked"))?;
                log::info!("pruning threshold {:.5}: {} of {} weights kept", m.threshold, m.survivors(), m.mask.len());
                w.set_mask(m.mask)?;
            }
        }
    }

    let first = cfg.first_epoch + warm;
    let mut hooks = CompressHooks { quant: *quant, alpha, first_compressed_epoch: first, compressed_epochs: rest };
    let comp_cfg = TrainConfig { epochs: rest, first_epoch: first, ..cfg.clone() };
    let silenced = if quant.dropout_on_binarized { Vec::new() } else { silence_dropout_after_binarized(net) };
    let compressed = train(net, data, &comp_cfg, &mut hooks);
    for (i, rate) in silenced {
        net.set_dropout_rate(i, rate);
    }
    let compressed = compressed?;
    // Final weights are always the deterministic image of the shadow weights.
    net.refresh_effective();
    Ok(CompressReport { warmup, compressed, survivors: survivor_counts(net) })
}

/// Sets the rate of every dropout layer whose nearest weighted predecessor is
/// binarized to zero; returns `(layer index, previous rate)`.
fn silence_dropout_after_binarized<T: Real>(net: &mut Network<T>) -> Vec<(usize, f32)> {
    let mut after_binarized = false;
    let mut found = Vec::new();
    for (i, (spec, state)) in net.spec().layers.iter().zip(&net.layers).enumerate() {
        if let Some(w) = state.weights() {
            after_binarized = w.quantized;
        }
        if let LayerSpec::Dropout { rate } = spec {
            if after_binarized && *rate > 0.0 {
                found.push((i, *rate));
            }
        }
    }
    for &(i, _) in &found {
        net.set_dropout_rate(i, 0.0);
    }
    found
}

fn survivor_counts<T: Real>(net: &Network<T>) -> Vec<(usize, usize)> {
    net.layers.iter().filter_map(LayerState::weights).map(|w| (w.survivors(), w.len())).collect()
}

/// Binarizes every layer of an MLP.
pub fn train_quantized_mlp<T: Real>(
    net: &mut Network<T>,
    data: &PatchSet,
    cfg: &TrainConfig,
    quant: &QuantConfig,
) -> Result<CompressReport> {
    if !net.spec().is_mlp() {
        return Err(Error::Config("quantized MLP training needs an MLP spec".into()));
    }
    let n = weighted_layer_kinds(net).len();
    train_compressed(net, data, cfg, quant, &vec![LayerPolicy::Quantize; n], None)
}

/// Prunes convolution layers with rate `alpha` and binarizes fully connected layers.
pub fn train_pruned_quantized_cnn<T: Real>(
    net: &mut Network<T>,
    data: &PatchSet,
    alpha: f64,
    cfg: &TrainConfig,
    quant: &QuantConfig,
) -> Result<CompressReport> {
    let policies = cnn_policies(net, LayerPolicy::Prune)?;
    train_compressed(net, data, cfg, quant, &policies, Some(AlphaSchedule::Constant(alpha)))
}

/// Binarizes every layer of a CNN, convolutions included.
pub fn train_quantized_cnn<T: Real>(
    net: &mut Network<T>,
    data: &PatchSet,
    cfg: &TrainConfig,
    quant: &QuantConfig,
) -> Result<CompressReport> {
    let policies = cnn_policies(net, LayerPolicy::Quantize)?;
    train_compressed(net, data, cfg, quant, &policies, None)
}

fn cnn_policies<T: Real>(net: &Network<T>, conv: LayerPolicy) -> Result<Vec<LayerPolicy>> {
    if !net.spec().has_conv() {
        return Err(Error::Config("CNN compression needs a spec with convolution layers".into()));
    }
    Ok(weighted_layer_kinds(net)
        .iter()
        .map(|l| if matches!(l, LayerSpec::Conv { .. }) { conv } else { LayerPolicy::Quantize })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn deterministic_signs() {
        assert_eq!(binarize_det(&[0.3f32, -0.5, 0.0, -0.0]).unwrap(), vec![1.0, -1.0, 1.0, 1.0]);
        let once = binarize_det(&[0.7f64, -2.0, 1e-30]).unwrap();
        assert_eq!(binarize_det(&once).unwrap(), once);
        assert!(binarize_det(&[f32::NAN]).is_err());
    }

    #[test]
    fn hard_sigmoid_values() {
        assert_eq!(hard_sigmoid(0.0), 0.5);
        assert_eq!(hard_sigmoid(0.5), 0.75);
        assert_eq!(hard_sigmoid(1.0), 1.0);
        assert_eq!(hard_sigmoid(7.0), 1.0);
        assert_eq!(hard_sigmoid(-1.0), 0.0);
        assert_eq!(hard_sigmoid(-3.0), 0.0);
    }

    #[test]
    fn stochastic_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(binarize_stoch(&[1.0f64; 100], &mut rng).unwrap().iter().all(|&v| v == 1.0));
        for (w, p) in [(0.0f64, 0.5), (0.5, 0.75)] {
            let draws = binarize_stoch(&vec![w; 10_000], &mut rng).unwrap();
            let freq = draws.iter().filter(|&&v| v == 1.0).count() as f64 / 1e4;
            assert!((freq - p).abs() <= 0.02, "w={w} freq={freq}");
        }
    }

    #[test]
    fn mask_thresholds() {
        let w = [0.1f64, -0.05, 0.9, -0.8];
        assert!(compute_mask(&w, 0.0).unwrap().mask.iter().all(|&m| m == 1));
        assert!(compute_mask(&w, 1e9).unwrap().mask.iter().all(|&m| m == 0));
        let alpha = 0.2 / std_dev(&w);
        let m = compute_mask(&w, alpha).unwrap();
        assert!((m.threshold - 0.2).abs() < 1e-12);
        assert_eq!(m.mask, vec![0, 0, 1, 1]);
        assert!(compute_mask(&w, -1.0).is_err());
    }

    #[test]
    fn masked_update_examples() {
        let mut w = [1.0f64, 2.0, 3.0];
        masked_update(&mut w, &[1.0, 1.0, 1.0], &[1, 1, 1], 0.5).unwrap();
        assert_eq!(w, [0.5, 1.5, 2.5]);
        let mut w = [1.0f64, 2.0, 3.0];
        masked_update(&mut w, &[1.0, 1.0, 1.0], &[0, 0, 0], 0.5).unwrap();
        assert_eq!(w, [0.0, 0.0, 0.0]);
        let mut w = [1.0f64, 2.0, 3.0];
        masked_update(&mut w, &[1.0, 1.0, 1.0], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(w, [0.5, 0.0, 2.5]);
    }

    #[test]
    fn alpha_schedule_interpolates() {
        let s = AlphaSchedule::Linear { start: 0.2, end: 1.0 };
        assert_eq!(s.at(0, 5), 0.2);
        assert!((s.at(4, 5) - 1.0).abs() < 1e-12);
        assert_eq!(AlphaSchedule::Constant(0.7).at(3, 5), 0.7);
    }
}
