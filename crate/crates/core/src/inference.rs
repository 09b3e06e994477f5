//! Frozen networks for inference.
//!
//! Batch norm is folded into a per-channel affine map, binarized layers are packed
//! one bit per weight and evaluated with additions and subtractions only, and
//! heavily pruned convolutions are stored as sparse (index, value) lists.

use rayon::prelude::*;

use crate::colorspace::ChannelImage;
use crate::dataset::patches::write_patch;
use crate::dataset::BinaryMask;
use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvGeom, PoolGeom};
use crate::nn::{Activation, InputShape, LayerSpec, LayerState, Network, Shape};

/// Sign-packed weight matrix: bit `i` of row `j` is 1 for `+1`, 0 for `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedLayer {
    in_dim: usize,
    out_dim: usize,
    words_per_row: usize,
    bits: Vec<u64>,
    bias: Vec<f32>,
}

impl BinarizedLayer {
    /// Packs a row-major `[out_dim][in_dim]` matrix whose entries are all `±1`.
    pub fn from_signs(signs: &[f32], in_dim: usize, out_dim: usize, bias: Vec<f32>) -> Result<Self> {
        if signs.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "{} signs and {} biases for a {in_dim}->{out_dim} layer",
                signs.len(),
                bias.len()
            )));
        }
        let words_per_row = in_dim.div_ceil(64);
        let mut bits = vec![0u64; words_per_row * out_dim];
        for (j, row) in signs.chunks_exact(in_dim.max(1)).enumerate().take(out_dim) {
            for (i, &s) in row.iter().enumerate() {
                if s == 1.0 {
                    bits[j * words_per_row + i / 64] |= 1 << (i % 64);
                } else if s != -1.0 {
                    return Err(Error::Data(format!("weight {s} at ({j}, {i}) is not +1 or -1")));
                }
            }
        }
        Ok(BinarizedLayer { in_dim, out_dim, words_per_row, bits, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bit_count(&self) -> usize {
        self.in_dim * self.out_dim
    }

    /// Row-major `±1` matrix.
    pub fn unpack(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.bit_count());
        for j in 0..self.out_dim {
            let row = &self.bits[j * self.words_per_row..][..self.words_per_row];
            out.extend((0..self.in_dim).map(|i| if row[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 }));
        }
        out
    }

    /// `out[j] = Σ_i ±x[i] + bias[j]`, summed in ascending `i` with the bias added last.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.in_dim {
            return Err(Error::Shape(format!("input of {} for a layer of {} inputs", x.len(), self.in_dim)));
        }
        let mut out = vec![0.0f32; self.out_dim];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    fn matvec_into(&self, x: &[f32], out: &mut [f32]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.bits[j * self.words_per_row..][..self.words_per_row];
            let mut acc = 0.0f32;
            for (w, chunk) in row.iter().zip(x.chunks(64)) {
                let mut word = *w;
                for &v in chunk {
                    if word & 1 == 1 {
                        acc += v;
                    } else {
                        acc -= v;
                    }
                    word >>= 1;
                }
            }
            *o = acc + self.bias[j];
        }
    }
}

/// Free-function form of [`BinarizedLayer::matvec`].
pub fn binarized_matvec(layer: &BinarizedLayer, x: &[f32]) -> Result<Vec<f32>> {
    layer.matvec(x)
}

/// Reference product with an explicit weight matrix, in the same summation order
/// as [`binarized_matvec`].
pub fn dense_matvec(weights: &[f32], in_dim: usize, bias: &[f32], x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != in_dim || weights.len() != in_dim * bias.len() {
        return Err(Error::Shape("dense_matvec dimensions disagree".into()));
    }
    Ok(bias
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let mut acc = 0.0f32;
            for (w, v) in weights[j * in_dim..][..in_dim].iter().zip(x) {
                acc += w * v;
            }
            acc + b
        })
        .collect())
}

/// Weights of a frozen dense or convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenWeights {
    /// Row-major `[out][in]` with a bias per output.
    Full { weights: Vec<f32>, bias: Vec<f32> },
    /// Per output: indices and values of the surviving weights.
    Sparse { rows: Vec<Vec<(u32, f32)>>, bias: Vec<f32> },
    Binary(BinarizedLayer),
}

impl FrozenWeights {
    /// Stored (non-pruned) weight count.
    pub fn stored(&self) -> usize {
        match self {
            FrozenWeights::Full { weights, .. } => weights.len(),
            FrozenWeights::Sparse { rows, .. } => rows.iter().map(Vec::len).sum(),
            FrozenWeights::Binary(b) => b.bit_count(),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, FrozenWeights::Binary(_))
    }

    /// `rows × inputs` product; `out[r][j]` for `x[r]`. `reference` evaluates binary and
    /// sparse weights through their dense expansion.
    fn apply(&self, x: &[f32], rows: usize, inputs: usize, outputs: usize, reference: bool) -> Vec<f32> {
        let mut out = vec![0.0f32; rows * outputs];
        match self {
            FrozenWeights::Full { weights, bias } => {
                ops::matmul_bt(rows, inputs, outputs, x, weights, &mut out);
                for row in out.chunks_exact_mut(outputs) {
                    for (v, &b) in row.iter_mut().zip(bias) {
                        *v += b;
                    }
                }
            }
            FrozenWeights::Binary(b) if reference => {
                let w = b.unpack();
                for (xr, or) in x.chunks_exact(inputs).zip(out.chunks_exact_mut(outputs)) {
                    or.copy_from_slice(&dense_matvec(&w, inputs, &b.bias, xr).expect("checked dims"));
                }
            }
            FrozenWeights::Binary(b) => {
                for (xr, or) in x.chunks_exact(inputs).zip(out.chunks_exact_mut(outputs)) {
                    b.matvec_into(xr, or);
                }
            }
            FrozenWeights::Sparse { rows: sparse, bias } if reference => {
                let mut w = vec![0.0f32; outputs * inputs];
                for (j, r) in sparse.iter().enumerate() {
                    for &(i, v) in r {
                        w[j * inputs + i as usize] = v;
                    }
                }
                for (xr, or) in x.chunks_exact(inputs).zip(out.chunks_exact_mut(outputs)) {
                    or.copy_from_slice(&dense_matvec(&w, inputs, bias, xr).expect("checked dims"));
                }
            }
            FrozenWeights::Sparse { rows: sparse, bias } => {
                for (xr, or) in x.chunks_exact(inputs).zip(out.chunks_exact_mut(outputs)) {
                    for ((o, r), &b) in or.iter_mut().zip(sparse).zip(bias) {
                        let mut acc = 0.0f32;
                        for &(i, v) in r {
                            acc += v * xr[i as usize];
                        }
                        *o = acc + b;
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrozenLayer {
    Dense { weights: FrozenWeights, inputs: usize, outputs: usize, activation: Activation },
    Conv { weights: FrozenWeights, in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    /// Folded batch norm: `y = scale·x + shift` per channel.
    Affine { scale: Vec<f32>, shift: Vec<f32> },
    MaxPool { kernel: usize, stride: usize },
    Relu,
    Flatten,
    Softmax,
}

/// Which kernels evaluate binarized and sparse layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPath {
    /// Packed sign bits and sparse lists.
    Fast,
    /// Dense `±1` and zero-filled matrices.
    Reference,
}

/// Immutable inference network.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNet {
    input: InputShape,
    shapes: Vec<Shape>,
    norm_mean: Vec<f32>,
    norm_scale: Vec<f32>,
    layers: Vec<FrozenLayer>,
    provenance: String,
}

/// Pruned layers sparser than this are stored as index lists.
pub const SPARSE_THRESHOLD: f64 = 0.5;

impl FrozenNet {
    /// Freezes `net`; `provenance` identifies the source (usually a checkpoint hash).
    pub fn from_network(net: &Network<f32>, provenance: impl Into<String>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut shapes = Vec::new();
        for ((spec, state), &shape) in net.spec().layers.iter().zip(&net.layers).zip(net.shapes()) {
            let frozen = match (*spec, state) {
                (LayerSpec::Dense { inputs, outputs, activation }, LayerState::Dense(w)) => FrozenLayer::Dense {
                    weights: freeze_weights(w, inputs, outputs)?,
                    inputs,
                    outputs,
                    activation,
                },
                (LayerSpec::Conv { in_channels, out_channels, kernel, padding }, LayerState::Conv(w)) => {
                    FrozenLayer::Conv {
                        weights: freeze_weights(w, in_channels * kernel * kernel, out_channels)?,
                        in_channels,
                        out_channels,
                        kernel,
                        padding,
                    }
                }
                (LayerSpec::BatchNorm { .. }, LayerState::BatchNorm(bn)) => {
                    let (scale, shift) = bn.folded();
                    FrozenLayer::Affine { scale, shift }
                }
                (LayerSpec::MaxPool { kernel, stride, .. }, _) => FrozenLayer::MaxPool { kernel, stride },
                (LayerSpec::Relu, _) => FrozenLayer::Relu,
                (LayerSpec::Flatten, _) => FrozenLayer::Flatten,
                (LayerSpec::Softmax, _) => FrozenLayer::Softmax,
                (LayerSpec::Dropout { .. }, _) => continue,
                (l, _) => return Err(Error::Shape(format!("{} layer has mismatched state", l.kind()))),
            };
            layers.push(frozen);
            shapes.push(shape);
        }
        let norm = net.input_norm();
        Ok(FrozenNet {
            input: net.spec().input,
            shapes,
            norm_mean: norm.mean.clone(),
            norm_scale: norm.scale.clone(),
            layers,
            provenance: provenance.into(),
        })
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn layers(&self) -> &[FrozenLayer] {
        &self.layers
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Positive-class probability for each of the `n` flattened patches in `x`.
    pub fn predict(&self, x: &[f32], path: ExecPath) -> Result<Vec<f32>> {
        let len = self.input.len();
        if x.is_empty() || x.len() % len != 0 {
            return Err(Error::Shape(format!("input of {} values is not a batch of {len}-value patches", x.len())));
        }
        let batch = x.len() / len;
        let probs = self.forward(x, batch, path);
        Ok(probs.chunks_exact(2).map(|r| r[1]).collect())
    }

    /// `[N, 2]` class probabilities.
    pub fn forward(&self, x: &[f32], batch: usize, path: ExecPath) -> Vec<f32> {
        let reference = path == ExecPath::Reference;
        let plane = self.input.height * self.input.width;
        let c = self.input.channels;
        let mut cur: Vec<f32> = Vec::with_capacity(x.len());
        for n in 0..batch {
            for ch in 0..c {
                let (m, s) = (self.norm_mean[ch], self.norm_scale[ch]);
                cur.extend(x[(n * c + ch) * plane..][..plane].iter().map(|&v| (v - m) * s));
            }
        }
        let mut in_shape =
            Shape::Spatial { channels: self.input.channels, height: self.input.height, width: self.input.width };
        for (layer, &out_shape) in self.layers.iter().zip(&self.shapes) {
            cur = match layer {
                FrozenLayer::Dense { weights, inputs, outputs, activation } => {
                    let mut y = weights.apply(&cur, batch, *inputs, *outputs, reference);
                    match activation {
                        Activation::Identity => {}
                        Activation::Sigmoid => y.iter_mut().for_each(|v| *v = ops::sigmoid(*v)),
                        Activation::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
                    }
                    y
                }
                FrozenLayer::Conv { weights, in_channels, out_channels, kernel, padding } => {
                    let Shape::Spatial { height, width, .. } = in_shape else { unreachable!() };
                    let geom =
                        ConvGeom { batch, channels: *in_channels, height, width, kernel: *kernel, padding: *padding };
                    let col = ops::im2col(&cur, &geom);
                    let rows = weights.apply(&col, geom.rows(), geom.col_len(), *out_channels, reference);
                    ops::rows_to_planes(&rows, batch, geom.out_h() * geom.out_w(), *out_channels)
                }
                FrozenLayer::Affine { scale, shift } => {
                    let spatial = in_shape.len() / scale.len();
                    let mut y = cur;
                    for (i, v) in y.iter_mut().enumerate() {
                        let ch = (i / spatial) % scale.len();
                        *v = scale[ch] * *v + shift[ch];
                    }
                    y
                }
                FrozenLayer::MaxPool { kernel, stride } => {
                    let Shape::Spatial { channels, height, width } = in_shape else { unreachable!() };
                    let Shape::Spatial { height: out_h, width: out_w, .. } = out_shape else { unreachable!() };
                    let g = PoolGeom { batch, channels, height, width, kernel: *kernel, stride: *stride, out_h, out_w };
                    ops::maxpool_forward(&cur, &g).0
                }
                FrozenLayer::Relu => cur.into_iter().map(|v| v.max(0.0)).collect(),
                FrozenLayer::Flatten => cur,
                FrozenLayer::Softmax => {
                    ops::log_softmax(&cur, 2).into_iter().map(f32::exp).collect()
                }
            };
            in_shape = out_shape;
        }
        cur
    }

    /// Per-pixel bleeding probability from the reflect-padded patch centered on each
    /// pixel, and the mask `probability >= 0.5`.
    pub fn segment(&self, img: &ChannelImage) -> Result<(Vec<f32>, BinaryMask)> {
        self.segment_with(img, ExecPath::Fast)
    }

    pub fn segment_with(&self, img: &ChannelImage, path: ExecPath) -> Result<(Vec<f32>, BinaryMask)> {
        let size = self.input.height;
        if self.input.width != size || size % 2 == 0 {
            return Err(Error::Shape("segmentation needs square odd-sized patches".into()));
        }
        if img.ids().len() != self.input.channels {
            return Err(Error::Shape(format!(
                "image has {} channels, network expects {}",
                img.ids().len(),
                self.input.channels
            )));
        }
        let (w, h) = (img.width(), img.height());
        let len = self.input.len();
        let rows: Vec<Vec<f32>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut patches = vec![0.0f32; w * len];
                for (x, out) in patches.chunks_exact_mut(len).enumerate() {
                    write_patch(img, x, y, size, out);
                }
                self.predict(&patches, path)
            })
            .collect::<Result<_>>()?;
        let probs: Vec<f32> = rows.into_iter().flatten().collect();
        let mask = BinaryMask::new(w, h, probs.iter().map(|&p| (p >= 0.5) as u8).collect())?;
        Ok((probs, mask))
    }
}

fn freeze_weights(w: &crate::nn::WeightState<f32>, inputs: usize, outputs: usize) -> Result<FrozenWeights> {
    if w.quantized {
        return Ok(FrozenWeights::Binary(BinarizedLayer::from_signs(&w.effective, inputs, outputs, w.bias.clone())?));
    }
    let sparsity = 1.0 - w.survivors() as f64 / w.len().max(1) as f64;
    if w.mask.is_some() && sparsity > SPARSE_THRESHOLD {
        let mask = w.mask.as_ref().expect("checked");
        let rows = (0..outputs)
            .map(|j| {
                (0..inputs)
                    .filter(|&i| mask[j * inputs + i] != 0)
                    .map(|i| (i as u32, w.effective[j * inputs + i]))
                    .collect()
            })
            .collect();
        return Ok(FrozenWeights::Sparse { rows, bias: w.bias.clone() });
    }
    Ok(FrozenWeights::Full { weights: w.effective.clone(), bias: w.bias.clone() })
}
