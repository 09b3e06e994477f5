use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamConfig, Network, Real, Tensor};
use crate::dataset::PatchSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Index of the first epoch. Shuffling and dropout for epoch `e` depend only on
    /// `(seed, e)`, so a run split into consecutive phases matches a single run.
    pub first_epoch: usize,
    /// Learning rate of epoch `e` is `adam.lr * lr_decay^e`.
    pub lr_decay: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig { epochs, batch_size: 128, adam: AdamConfig::default(), seed, first_epoch: 0, lr_decay: 1.0 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.adam.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Callbacks around the optimizer; the compression schedules are built on these.
pub trait TrainHooks<T: Real> {
    fn on_epoch_start(&mut self, _epoch: usize, _net: &mut Network<T>, _rng: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    /// Runs before the forward pass of every batch.
    fn before_step(&mut self, _net: &mut Network<T>, _rng: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    /// Runs after the optimizer updated the shadow weights. The default re-derives
    /// the effective weights.
    fn after_step(&mut self, net: &mut Network<T>, _rng: &mut ChaCha8Rng) -> Result<()> {
        net.refresh_effective();
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _mean_loss: f64, _net: &mut Network<T>) -> Result<()> {
        Ok(())
    }
}

/// Plain full-precision training.
pub struct NoHooks;

impl<T: Real> TrainHooks<T> for NoHooks {}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of every epoch, as measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch training with cross-entropy loss and Adam.
///
/// A trailing batch of a single sample is skipped so batch norm always sees
/// at least two values per channel.
pub fn train<T: Real, H: TrainHooks<T>>(
    net: &mut Network<T>,
    data: &PatchSet,
    cfg: &TrainConfig,
    hooks: &mut H,
) -> Result<TrainReport> {
    let input = net.spec().input;
    if data.patch_len() != input.len() || data.channel_ids().len() != input.channels {
        return Err(Error::Shape(format!(
            "patches of {} values in {} channels do not fit a {}x{}x{} input",
            data.patch_len(),
            data.channel_ids().len(),
            input.channels,
            input.height,
            input.width
        )));
    }
    if data.len() < 2 {
        return Err(Error::Data("training needs at least two patches".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    if !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        return Err(Error::Config(format!("learning rate decay must be in (0, 1], got {}", cfg.lr_decay)));
    }
    let len = input.len();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut xbuf: Vec<T> = Vec::with_capacity(cfg.batch_size * len);
    let mut ybuf: Vec<u8> = Vec::with_capacity(cfg.batch_size);

    for epoch in cfg.first_epoch..cfg.first_epoch + cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        hooks.on_epoch_start(epoch, net, &mut rng)?;
        let adam = AdamConfig { lr: cfg.lr_at(epoch), ..cfg.adam };
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            xbuf.clear();
            ybuf.clear();
            for &i in chunk {
                xbuf.extend(data.patch(i).iter().map(|&v| T::cast(v as f64)));
                ybuf.push(data.labels()[i]);
            }
            let x = Tensor::new(vec![chunk.len(), input.channels, input.height, input.width], std::mem::take(&mut xbuf))?;
            hooks.before_step(net, &mut rng)?;
            let tape = net.forward_train(&x, &mut rng)?;
            let (loss, grads) = net.backward(&tape, &ybuf)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training diverged at epoch {epoch}, batch {b}: loss {loss}")));
            }
            net.apply_gradients(&grads, &adam)?;
            hooks.after_step(net, &mut rng)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            xbuf = x.into_data();
        }
        let mean = loss_sum / seen.max(1) as f64;
        log::info!("epoch {epoch}: loss {mean:.5}");
        report.epoch_losses.push(mean);
        hooks.on_epoch_end(epoch, mean, net)?;
    }
    Ok(report)
}
