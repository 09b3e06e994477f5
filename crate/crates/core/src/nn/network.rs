use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_update, AdamConfig};
use super::ops::{self, BnGeom, ConvGeom, PoolGeom};
use super::spec::{Activation, LayerSpec, NetworkSpec, Shape};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Weights of a dense or convolution layer.
///
/// `shadow` holds the trainable real values; `effective` is what the forward pass
/// uses: the sign of `shadow` when `quantized`, `shadow` with pruned positions
/// zeroed otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState<T> {
    pub shadow: Vec<T>,
    pub effective: Vec<T>,
    pub bias: Vec<T>,
    /// 1 = kept, 0 = pruned.
    pub mask: Option<Vec<u8>>,
    pub quantized: bool,
    pub m_w: Vec<T>,
    pub v_w: Vec<T>,
    pub m_b: Vec<T>,
    pub v_b: Vec<T>,
}

impl<T: Real> WeightState<T> {
    pub fn new(shadow: Vec<T>, bias: Vec<T>) -> Self {
        let (nw, nb) = (shadow.len(), bias.len());
        WeightState {
            effective: shadow.clone(),
            shadow,
            bias,
            mask: None,
            quantized: false,
            m_w: vec![T::zero(); nw],
            v_w: vec![T::zero(); nw],
            m_b: vec![T::zero(); nb],
            v_b: vec![T::zero(); nb],
        }
    }

    pub fn len(&self) -> usize {
        self.shadow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shadow.is_empty()
    }

    /// Re-derives `effective` from `shadow`, `mask` and `quantized`.
    pub fn refresh_effective(&mut self) {
        for i in 0..self.shadow.len() {
            let kept = self.mask.as_ref().is_none_or(|m| m[i] != 0);
            self.effective[i] = match (kept, self.quantized) {
                (false, _) => T::zero(),
                (true, true) => {
                    if self.shadow[i] >= T::zero() {
                        T::one()
                    } else {
                        -T::one()
                    }
                }
                (true, false) => self.shadow[i],
            };
        }
    }

    /// Installs a pruning mask: pruned weights and their Adam moments are zeroed.
    pub fn set_mask(&mut self, mask: Vec<u8>) -> Result<()> {
        if mask.len() != self.shadow.len() {
            return Err(Error::Shape(format!("mask has {} entries for {} weights", mask.len(), self.shadow.len())));
        }
        if mask.iter().any(|&b| b > 1) {
            return Err(Error::Data("mask entries must be 0 or 1".into()));
        }
        for (i, &keep) in mask.iter().enumerate() {
            if keep == 0 {
                self.shadow[i] = T::zero();
                self.m_w[i] = T::zero();
                self.v_w[i] = T::zero();
            }
        }
        self.mask = Some(mask);
        self.refresh_effective();
        Ok(())
    }

    /// Weights not removed by the mask.
    pub fn survivors(&self) -> usize {
        self.mask.as_ref().map_or(self.shadow.len(), |m| m.iter().filter(|&&b| b != 0).count())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub m_g: Vec<T>,
    pub v_g: Vec<T>,
    pub m_b: Vec<T>,
    pub v_b: Vec<T>,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        let z = vec![T::zero(); channels];
        BnState {
            gamma: vec![T::one(); channels],
            beta: z.clone(),
            running_mean: z.clone(),
            running_var: vec![T::one(); channels],
            m_g: z.clone(),
            v_g: z.clone(),
            m_b: z.clone(),
            v_b: z,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference-time affine form `y = scale·x + shift`, folded in double precision.
    pub fn folded(&self) -> (Vec<T>, Vec<T>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let s = self.gamma[c].as_f64() / (self.running_var[c].as_f64() + BN_EPS).sqrt();
            scale.push(T::cast(s));
            shift.push(T::cast(self.beta[c].as_f64() - self.running_mean[c].as_f64() * s));
        }
        (scale, shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerState<T> {
    Dense(WeightState<T>),
    Conv(WeightState<T>),
    BatchNorm(BnState<T>),
    Stateless,
}

impl<T> LayerState<T> {
    pub fn weights(&self) -> Option<&WeightState<T>> {
        match self {
            LayerState::Dense(w) | LayerState::Conv(w) => Some(w),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut WeightState<T>> {
        match self {
            LayerState::Dense(w) | LayerState::Conv(w) => Some(w),
            _ => None,
        }
    }
}

/// Gradient of one parameterized layer: weights and biases, or BN gamma and beta.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<LayerGrad<T>>>,
}

impl<T: Real> Gradients<T> {
    /// All gradient values in the order of [`Network::param_slices_mut`].
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

enum Cache<T> {
    Dense { input: Vec<T>, output: Vec<T>, relu: bool },
    Conv { col: Vec<T>, geom: ConvGeom },
    Pool { argmax: Vec<u32>, input_len: usize },
    Bn { xhat: Vec<T>, inv_std: Vec<T>, geom: BnGeom },
    Relu { output: Vec<T> },
    Dropout { keep: Vec<T> },
    Pass,
}

/// Intermediate values recorded by [`Network::forward_train`] for the backward pass.
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    log_probs: Vec<T>,
    batch: usize,
}

impl<T: Real> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `[N, 2]` class probabilities.
    pub fn probabilities(&self) -> Tensor<T> {
        let p = self.log_probs.iter().map(|v| v.exp()).collect();
        Tensor::new(vec![self.batch, 2], p).expect("two classes per sample")
    }

    /// Mean cross-entropy against `labels`.
    pub fn loss(&self, labels: &[u8]) -> Result<T> {
        check_labels(labels, self.batch)?;
        let total: T = labels.iter().enumerate().map(|(n, &y)| -self.log_probs[n * 2 + y as usize]).sum();
        Ok(total / T::cast(self.batch as f64))
    }

    /// Discrete choices made by ReLU units and max-pool windows; finite-difference
    /// probes whose pattern changes between the two evaluations straddle a kink.
    pub fn switch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for c in &self.caches {
            match c {
                Cache::Relu { output } | Cache::Dense { output, relu: true, .. } => {
                    out.extend(output.iter().map(|&v| (v > T::zero()) as u32))
                }
                Cache::Pool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }
}

fn check_labels(labels: &[u8], batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Per-channel input standardization applied before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Real> InputNorm<T> {
    pub fn identity(channels: usize) -> Self {
        InputNorm { mean: vec![T::zero(); channels], scale: vec![T::one(); channels] }
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == T::zero()) && self.scale.iter().all(|&s| s == T::one())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    norm: InputNorm<T>,
    pub layers: Vec<LayerState<T>>,
    /// Number of optimizer steps taken.
    pub adam_t: u64,
}

enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl<T: Real> Network<T> {
    /// Glorot-uniform weights, zero biases, identity batch norm.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::zeros(spec)?;
        for (layer, ls) in net.spec.layers.iter().zip(net.layers.iter_mut()) {
            let (fan_in, fan_out) = match *layer {
                LayerSpec::Dense { inputs, outputs, .. } => (inputs, outputs),
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    (in_channels * kernel * kernel, out_channels * kernel * kernel)
                }
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = ls.weights_mut().expect("weighted layer");
            for v in w.shadow.iter_mut() {
                *v = T::cast(rng.random_range(-limit..limit));
            }
            w.refresh_effective();
        }
        Ok(net)
    }

    /// All parameters zero (batch-norm gamma and running variance one).
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dense { .. } => {
                    LayerState::Dense(WeightState::new(vec![T::zero(); l.weight_count()], vec![T::zero(); l.bias_count()]))
                }
                LayerSpec::Conv { .. } => {
                    LayerState::Conv(WeightState::new(vec![T::zero(); l.weight_count()], vec![T::zero(); l.bias_count()]))
                }
                LayerSpec::BatchNorm { channels } => LayerState::BatchNorm(BnState::new(channels)),
                _ => LayerState::Stateless,
            })
            .collect();
        let norm = InputNorm::identity(spec.input.channels);
        Ok(Network { spec, shapes, norm, layers, adam_t: 0 })
    }

    /// Assembles a network from stored parts, validating every buffer length.
    pub fn from_parts(spec: NetworkSpec, norm: InputNorm<T>, layers: Vec<LayerState<T>>, adam_t: u64) -> Result<Self> {
        let template = Network::<T>::zeros(spec)?;
        if layers.len() != template.layers.len() {
            return Err(Error::Shape(format!("{} layer states for {} layers", layers.len(), template.layers.len())));
        }
        let c = template.spec.input.channels;
        if norm.mean.len() != c || norm.scale.len() != c {
            return Err(Error::Shape("input normalization does not match input channels".into()));
        }
        for (i, (got, want)) in layers.iter().zip(&template.layers).enumerate() {
            let ok = match (got, want) {
                (LayerState::Dense(a), LayerState::Dense(b)) | (LayerState::Conv(a), LayerState::Conv(b)) => {
                    let n = b.shadow.len();
                    let nb = b.bias.len();
                    a.shadow.len() == n
                        && a.effective.len() == n
                        && a.m_w.len() == n
                        && a.v_w.len() == n
                        && a.bias.len() == nb
                        && a.m_b.len() == nb
                        && a.v_b.len() == nb
                        && a.mask.as_ref().is_none_or(|m| m.len() == n)
                }
                (LayerState::BatchNorm(a), LayerState::BatchNorm(b)) => {
                    let n = b.channels();
                    [&a.gamma, &a.beta, &a.running_mean, &a.running_var, &a.m_g, &a.v_g, &a.m_b, &a.v_b]
                        .iter()
                        .all(|v| v.len() == n)
                }
                (LayerState::Stateless, LayerState::Stateless) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!("layer {i} state does not match the spec")));
            }
        }
        Ok(Network { layers, norm, adam_t, ..template })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub(crate) fn set_dropout_rate(&mut self, index: usize, rate: f32) {
        if let Some(LayerSpec::Dropout { rate: r }) = self.spec.layers.get_mut(index) {
            *r = rate;
        }
    }

    /// Per-layer output shapes.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn input_norm(&self) -> &InputNorm<T> {
        &self.norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm<T>) -> Result<()> {
        let c = self.spec.input.channels;
        if norm.mean.len() != c || norm.scale.len() != c {
            return Err(Error::Shape(format!("input normalization needs {c} channels")));
        }
        if norm.scale.iter().chain(&norm.mean).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("input normalization must be finite".into()));
        }
        self.norm = norm;
        Ok(())
    }

    pub fn refresh_effective(&mut self) {
        for w in self.layers.iter_mut().filter_map(LayerState::weights_mut) {
            w.refresh_effective();
        }
    }

    /// Mutable views of every trainable parameter vector (weights then bias per layer;
    /// gamma then beta for batch norm). Callers that edit weights must call
    /// [`Network::refresh_effective`] afterwards.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerState::Dense(w) | LayerState::Conv(w) => {
                    out.push(&mut w.shadow);
                    out.push(&mut w.bias);
                }
                LayerState::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                LayerState::Stateless => {}
            }
        }
        out
    }

    fn input_shape(&self, i: usize) -> Shape {
        if i == 0 {
            let s = self.spec.input;
            Shape::Spatial { channels: s.channels, height: s.height, width: s.width }
        } else {
            self.shapes[i - 1]
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let s = self.spec.input;
        let want = [s.channels, s.height, s.width];
        let shape = x.shape();
        let matches = shape.len() == 4 && shape[1..] == want
            || shape.len() == 2 && shape[1] == s.len();
        if !matches || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "input batch {shape:?} does not match [N, {}, {}, {}]",
                s.channels, s.height, s.width
            )));
        }
        Ok(shape[0])
    }

    fn normalize(&self, x: &[T], batch: usize) -> Vec<T> {
        if self.norm.is_identity() {
            return x.to_vec();
        }
        let c = self.spec.input.channels;
        let plane = self.spec.input.height * self.spec.input.width;
        let mut out = Vec::with_capacity(x.len());
        for n in 0..batch {
            for ch in 0..c {
                let (m, s) = (self.norm.mean[ch], self.norm.scale[ch]);
                out.extend(x[(n * c + ch) * plane..][..plane].iter().map(|&v| (v - m) * s));
            }
        }
        out
    }

    /// Runs every layer but the final softmax; returns logits and, in training mode,
    /// the backward caches plus batch-norm batch statistics.
    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Tensor<T>, mut mode: Mode<'_>) -> Result<(Vec<T>, Vec<Cache<T>>, Vec<(usize, Vec<T>, Vec<T>)>)> {
        let batch = self.check_input(x)?;
        let training = matches!(mode, Mode::Train(_));
        let mut cur = self.normalize(x.data(), batch);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        for (i, (spec, state)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let in_shape = self.input_shape(i);
            let (next, cache) = match (*spec, state) {
                (LayerSpec::Dense { inputs, outputs, activation }, LayerState::Dense(w)) => {
                    let mut y = vec![T::zero(); batch * outputs];
                    ops::matmul_bt(batch, inputs, outputs, &cur, &w.effective, &mut y);
                    for row in y.chunks_exact_mut(outputs) {
                        for (v, &b) in row.iter_mut().zip(&w.bias) {
                            *v = activate(*v + b, activation);
                        }
                    }
                    let cache = if training { Cache::Dense { input: cur, output: y.clone(), relu: activation == Activation::Relu } } else { Cache::Pass };
                    (y, cache)
                }
                (LayerSpec::Conv { out_channels, kernel, padding, .. }, LayerState::Conv(w)) => {
                    let Shape::Spatial { channels, height, width } = in_shape else { unreachable!() };
                    let geom = ConvGeom { batch, channels, height, width, kernel, padding };
                    let col = ops::im2col(&cur, &geom);
                    let mut rows = vec![T::zero(); geom.rows() * out_channels];
                    ops::matmul_bt(geom.rows(), geom.col_len(), out_channels, &col, &w.effective, &mut rows);
                    for row in rows.chunks_exact_mut(out_channels) {
                        for (v, &b) in row.iter_mut().zip(&w.bias) {
                            *v += b;
                        }
                    }
                    let positions = geom.out_h() * geom.out_w();
                    let y = ops::rows_to_planes(&rows, batch, positions, out_channels);
                    let cache = if training { Cache::Conv { col, geom } } else { Cache::Pass };
                    (y, cache)
                }
                (LayerSpec::MaxPool { kernel, stride, .. }, _) => {
                    let Shape::Spatial { channels, height, width } = in_shape else { unreachable!() };
                    let Shape::Spatial { height: out_h, width: out_w, .. } = self.shapes[i] else { unreachable!() };
                    let geom = PoolGeom { batch, channels, height, width, kernel, stride, out_h, out_w };
                    let (y, argmax) = ops::maxpool_forward(&cur, &geom);
                    let cache = if training { Cache::Pool { argmax, input_len: cur.len() } } else { Cache::Pass };
                    (y, cache)
                }
                (LayerSpec::BatchNorm { channels }, LayerState::BatchNorm(bn)) => {
                    let geom = BnGeom { batch, channels, spatial: in_shape.len() / channels };
                    if training {
                        let r = ops::bn_forward_train(&cur, &geom, &bn.gamma, &bn.beta, T::cast(BN_EPS));
                        bn_stats.push((i, r.mean, r.var));
                        (r.out, Cache::Bn { xhat: r.xhat, inv_std: r.inv_std, geom })
                    } else {
                        let (scale, shift) = bn.folded();
                        (ops::channel_affine(&cur, &geom, &scale, &shift), Cache::Pass)
                    }
                }
                (LayerSpec::Relu, _) => {
                    let y: Vec<T> = cur.iter().map(|&v| v.max(T::zero())).collect();
                    let cache = if training { Cache::Relu { output: y.clone() } } else { Cache::Pass };
                    (y, cache)
                }
                (LayerSpec::Dropout { rate }, _) => match &mut mode {
                    Mode::Train(rng) if rate > 0.0 => {
                        let scale = T::cast(1.0 / (1.0 - rate as f64));
                        let keep: Vec<T> = (0..cur.len())
                            .map(|_| if rng.random::<f32>() >= rate { scale } else { T::zero() })
                            .collect();
                        let y = cur.iter().zip(&keep).map(|(&v, &k)| v * k).collect();
                        (y, Cache::Dropout { keep })
                    }
                    _ => (cur, Cache::Pass),
                },
                (LayerSpec::Flatten | LayerSpec::Softmax, _) => (cur, Cache::Pass),
                (l, _) => return Err(Error::Shape(format!("layer {i} ({}) has mismatched state", l.kind()))),
            };
            cur = next;
            if training {
                caches.push(cache);
            }
        }
        Ok((cur, caches, bn_stats))
    }

    /// Inference-mode forward pass: `[N, 2]` class probabilities.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x)?;
        let (logits, _, _) = self.run(x, Mode::Eval)?;
        let p = ops::log_softmax(&logits, 2).into_iter().map(|v| v.exp()).collect();
        Tensor::new(vec![batch, 2], p)
    }

    /// Training-mode forward pass (batch statistics, dropout). Updates batch-norm
    /// running statistics and returns the tape for [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tape<T>> {
        let batch = self.check_input(x)?;
        let (logits, caches, bn_stats) = self.run(x, Mode::Train(rng))?;
        let mom = T::cast(BN_MOMENTUM);
        for (i, mean, var) in bn_stats {
            let LayerState::BatchNorm(bn) = &mut self.layers[i] else { unreachable!() };
            let count = caches_count(&caches[i]);
            let unbias = if count > 1 { T::cast(count as f64 / (count - 1) as f64) } else { T::one() };
            for c in 0..bn.channels() {
                bn.running_mean[c] = mom * bn.running_mean[c] + (T::one() - mom) * mean[c];
                bn.running_var[c] = mom * bn.running_var[c] + (T::one() - mom) * var[c] * unbias;
            }
        }
        Ok(Tape { caches, log_probs: ops::log_softmax(&logits, 2), batch })
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    /// Weight gradients are taken with respect to the effective weights.
    pub fn backward(&self, tape: &Tape<T>, labels: &[u8]) -> Result<(T, Gradients<T>)> {
        let loss = tape.loss(labels)?;
        let batch = tape.batch;
        let inv_n = T::one() / T::cast(batch as f64);
        let mut grad: Vec<T> = tape.log_probs.iter().map(|v| v.exp()).collect();
        for (n, &y) in labels.iter().enumerate() {
            grad[n * 2 + y as usize] -= T::one();
        }
        grad.iter_mut().for_each(|g| *g *= inv_n);

        let mut out: Vec<Option<LayerGrad<T>>> = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let need_dx = i > 0;
            let spec = self.spec.layers[i];
            grad = match (&tape.caches[i], spec, &self.layers[i]) {
                (Cache::Dense { input, output, .. }, LayerSpec::Dense { inputs, outputs, activation }, LayerState::Dense(w)) => {
                    for (g, &y) in grad.iter_mut().zip(output) {
                        *g *= activation_grad(y, activation);
                    }
                    let mut dw = vec![T::zero(); outputs * inputs];
                    ops::matmul_at(outputs, batch, inputs, &grad, input, &mut dw);
                    let mut db = vec![T::zero(); outputs];
                    for row in grad.chunks_exact(outputs) {
                        for (b, &g) in db.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    out[i] = Some(LayerGrad { weights: dw, bias: db });
                    if need_dx {
                        let mut dx = vec![T::zero(); batch * inputs];
                        ops::matmul(batch, outputs, inputs, &grad, &w.effective, &mut dx);
                        dx
                    } else {
                        Vec::new()
                    }
                }
                (Cache::Conv { col, geom }, LayerSpec::Conv { out_channels, .. }, LayerState::Conv(w)) => {
                    let positions = geom.out_h() * geom.out_w();
                    let drows = ops::planes_to_rows(&grad, batch, positions, out_channels);
                    let mut dw = vec![T::zero(); out_channels * geom.col_len()];
                    ops::matmul_at(out_channels, geom.rows(), geom.col_len(), &drows, col, &mut dw);
                    let mut db = vec![T::zero(); out_channels];
                    for row in drows.chunks_exact(out_channels) {
                        for (b, &g) in db.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    out[i] = Some(LayerGrad { weights: dw, bias: db });
                    if need_dx {
                        let mut dcol = vec![T::zero(); geom.rows() * geom.col_len()];
                        ops::matmul(geom.rows(), out_channels, geom.col_len(), &drows, &w.effective, &mut dcol);
                        ops::col2im(&dcol, geom)
                    } else {
                        Vec::new()
                    }
                }
                (Cache::Pool { argmax, input_len }, _, _) => ops::maxpool_backward(&grad, argmax, *input_len),
                (Cache::Bn { xhat, inv_std, geom }, _, LayerState::BatchNorm(bn)) => {
                    let (dx, dgamma, dbeta) = ops::bn_backward(&grad, geom, xhat, inv_std, &bn.gamma);
                    out[i] = Some(LayerGrad { weights: dgamma, bias: dbeta });
                    dx
                }
                (Cache::Relu { output }, _, _) => {
                    grad.iter().zip(output).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect()
                }
                (Cache::Dropout { keep }, _, _) => grad.iter().zip(keep).map(|(&g, &k)| g * k).collect(),
                (Cache::Pass, _, _) => grad,
                _ => return Err(Error::Shape(format!("tape does not match layer {i}"))),
            };
        }
        Ok((loss, Gradients { layers: out }))
    }

    /// One Adam step on the shadow weights, biases and batch-norm affine parameters.
    /// Masked weights get zero gradient and are re-zeroed; `effective` is not refreshed.
    pub fn apply_gradients(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradient list does not match the network".into()));
        }
        self.adam_t += 1;
        let t = self.adam_t;
        for (state, g) in self.layers.iter_mut().zip(&grads.layers) {
            let Some(g) = g else { continue };
            match state {
                LayerState::Dense(w) | LayerState::Conv(w) => {
                    adam_update(&mut w.shadow, &g.weights, &mut w.m_w, &mut w.v_w, w.mask.as_deref(), t, cfg);
                    adam_update(&mut w.bias, &g.bias, &mut w.m_b, &mut w.v_b, None, t, cfg);
                    if let Some(mask) = &w.mask {
                        for (v, &k) in w.shadow.iter_mut().zip(mask) {
                            if k == 0 {
                                *v = T::zero();
                            }
                        }
                    }
                }
                LayerState::BatchNorm(bn) => {
                    adam_update(&mut bn.gamma, &g.weights, &mut bn.m_g, &mut bn.v_g, None, t, cfg);
                    adam_update(&mut bn.beta, &g.bias, &mut bn.m_b, &mut bn.v_b, None, t, cfg);
                }
                LayerState::Stateless => {}
            }
        }
        Ok(())
    }

    /// Bleeding-class probability for each of `n` flattened patches, in inference mode.
    pub fn predict_positive(&self, patches: &[f32]) -> Result<Vec<f32>> {
        let len = self.spec.input_len();
        if patches.len() % len != 0 {
            return Err(Error::Shape(format!("patch buffer is not a multiple of {len}")));
        }
        let mut out = Vec::with_capacity(patches.len() / len);
        for chunk in patches.chunks(512 * len) {
            let n = chunk.len() / len;
            let x = Tensor::from_f32(vec![n, len], chunk)?;
            let p = self.forward(&x)?;
            out.extend(p.data().chunks_exact(2).map(|r| r[1].as_f64() as f32));
        }
        Ok(out)
    }

    /// Copy with parameters converted to another element type. Adam moments are converted too.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::cast(x.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let cw = |w: &WeightState<T>| WeightState {
                    shadow: c(&w.shadow),
                    effective: c(&w.effective),
                    bias: c(&w.bias),
                    mask: w.mask.clone(),
                    quantized: w.quantized,
                    m_w: c(&w.m_w),
                    v_w: c(&w.v_w),
                    m_b: c(&w.m_b),
                    v_b: c(&w.v_b),
                };
                match l {
                    LayerState::Dense(w) => LayerState::Dense(cw(w)),
                    LayerState::Conv(w) => LayerState::Conv(cw(w)),
                    LayerState::BatchNorm(b) => LayerState::BatchNorm(BnState {
                        gamma: c(&b.gamma),
                        beta: c(&b.beta),
                        running_mean: c(&b.running_mean),
                        running_var: c(&b.running_var),
                        m_g: c(&b.m_g),
                        v_g: c(&b.v_g),
                        m_b: c(&b.m_b),
                        v_b: c(&b.v_b),
                    }),
                    LayerState::Stateless => LayerState::Stateless,
                }
            })
            .collect();
        Network {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            norm: InputNorm { mean: c(&self.norm.mean), scale: c(&self.norm.scale) },
            layers,
            adam_t: self.adam_t,
        }
    }
}

fn caches_count<T>(c: &Cache<T>) -> usize {
    match c {
        Cache::Bn { geom, .. } => geom.count(),
        _ => 0,
    }
}

#[inline]
fn activate<T: Real>(x: T, a: Activation) -> T {
    match a {
        Activation::Identity => x,
        Activation::Sigmoid => ops::sigmoid(x),
        Activation::Relu => x.max(T::zero()),
    }
}

/// Derivative expressed through the activation output `y`.
#[inline]
fn activation_grad<T: Real>(y: T, a: Activation) -> T {
    match a {
        Activation::Identity => T::one(),
        Activation::Sigmoid => y * (T::one() - y),
        Activation::Relu => {
            if y > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}
