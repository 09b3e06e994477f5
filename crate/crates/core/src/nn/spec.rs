use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Fully connected; flattens a spatial input.
    Dense { inputs: usize, outputs: usize, activation: Activation },
    /// Stride-1 convolution with `padding` zeros on each side.
    Conv { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    MaxPool { kernel: usize, stride: usize, ceil_mode: bool },
    BatchNorm { channels: usize },
    Relu,
    Dropout { rate: f32 },
    Flatten,
    Softmax,
}

impl LayerSpec {
    /// Number of weights (biases excluded) of a dense or convolution layer.
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => inputs * outputs,
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                in_channels * out_channels * kernel * kernel
            }
            _ => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "FC",
            LayerSpec::Conv { .. } => "Convolution",
            LayerSpec::MaxPool { .. } => "Max Pooling",
            LayerSpec::BatchNorm { .. } => "Batch Norm",
            LayerSpec::Relu => "ReLU",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Softmax => "Softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activation shape of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { channels, height, width } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Spatial { channels, height, width } => vec![channels, height, width],
            Shape::Flat(n) => vec![n],
        }
    }
}

pub(crate) fn pool_out(len: usize, kernel: usize, stride: usize, ceil_mode: bool) -> usize {
    if len < kernel {
        return if ceil_mode { 1 } else { 0 };
    }
    let span = len - kernel;
    let mut out = if ceil_mode { span.div_ceil(stride) + 1 } else { span / stride + 1 };
    // The last window must start inside the input.
    if ceil_mode && (out - 1) * stride >= len {
        out -= 1;
    }
    out
}

/// Architecture: input geometry plus an ordered layer list ending in a 2-way softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: InputShape, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = NetworkSpec { input, layers };
        spec.shapes()?;
        Ok(spec)
    }

    /// Output shape of every layer, validating adjacency along the way.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let bad = |i: usize, msg: String| Error::Shape(format!("layer {i}: {msg}"));
        if self.input.is_empty() {
            return Err(Error::Shape("empty input shape".into()));
        }
        let mut shape = Shape::Spatial {
            channels: self.input.channels,
            height: self.input.height,
            width: self.input.width,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (LayerSpec::Dense { inputs, outputs, .. }, s) => {
                    if s.len() != inputs || outputs == 0 {
                        return Err(bad(i, format!("dense expects {inputs} inputs, got {}", s.len())));
                    }
                    Shape::Flat(outputs)
                }
                (
                    LayerSpec::Conv { in_channels, out_channels, kernel, padding },
                    Shape::Spatial { channels, height, width },
                ) => {
                    if channels != in_channels || out_channels == 0 || kernel == 0 {
                        return Err(bad(i, format!("conv expects {in_channels} channels, got {channels}")));
                    }
                    let (h, w) = (height + 2 * padding, width + 2 * padding);
                    if h < kernel || w < kernel {
                        return Err(bad(i, "kernel larger than padded input".into()));
                    }
                    Shape::Spatial { channels: out_channels, height: h - kernel + 1, width: w - kernel + 1 }
                }
                (LayerSpec::MaxPool { kernel, stride, ceil_mode }, Shape::Spatial { channels, height, width }) => {
                    if kernel == 0 || stride == 0 {
                        return Err(bad(i, "pool kernel and stride must be positive".into()));
                    }
                    let (h, w) = (pool_out(height, kernel, stride, ceil_mode), pool_out(width, kernel, stride, ceil_mode));
                    if h == 0 || w == 0 {
                        return Err(bad(i, "pool output is empty".into()));
                    }
                    Shape::Spatial { channels, height: h, width: w }
                }
                (LayerSpec::BatchNorm { channels }, s) => {
                    let have = match s {
                        Shape::Spatial { channels, .. } => channels,
                        Shape::Flat(n) => n,
                    };
                    if have != channels {
                        return Err(bad(i, format!("batch norm over {channels} channels, got {have}")));
                    }
                    s
                }
                (LayerSpec::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(i, format!("dropout rate {rate} not in [0, 1)")));
                    }
                    s
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, s) => Shape::Flat(s.len()),
                (LayerSpec::Softmax, s) => {
                    if i + 1 != self.layers.len() {
                        return Err(bad(i, "softmax must be the last layer".into()));
                    }
                    if s != Shape::Flat(2) {
                        return Err(bad(i, format!("softmax expects 2 classes, got {s:?}")));
                    }
                    s
                }
                (l, s) => return Err(bad(i, format!("{} cannot follow shape {s:?}", l.kind()))),
            };
            out.push(shape);
        }
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::Shape("network must end in a 2-class softmax".into()));
        }
        Ok(out)
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    /// Weight count of every dense or convolution layer, in order.
    pub fn weight_counts(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.is_weighted()).map(LayerSpec::weight_count).collect()
    }

    pub fn total_weights(&self) -> usize {
        self.weight_counts().iter().sum()
    }

    pub fn has_conv(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    /// Only dense layers carry weights.
    pub fn is_mlp(&self) -> bool {
        !self.has_conv()
            && self.layers.iter().any(|l| matches!(l, LayerSpec::Dense { .. }))
    }
}

/// Three sigmoid hidden layers of 40, 20 and 8 units over a flattened 9x9x3 patch.
pub fn mlp_spec() -> NetworkSpec {
    mlp_spec_for(InputShape { channels: 3, height: 9, width: 9 })
}

pub fn mlp_spec_for(input: InputShape) -> NetworkSpec {
    let n = input.len();
    let dense = |inputs, outputs, activation| LayerSpec::Dense { inputs, outputs, activation };
    NetworkSpec::new(
        input,
        vec![
            dense(n, 40, Activation::Sigmoid),
            dense(40, 20, Activation::Sigmoid),
            dense(20, 8, Activation::Sigmoid),
            dense(8, 2, Activation::Identity),
            LayerSpec::Softmax,
        ],
    )
    .expect("mlp spec is consistent")
}

/// Two 3x3 same-padded conv blocks (64 and 32 filters, BN, ReLU, 2x2 ceil pooling)
/// followed by dense layers of 60 and 40 units with dropout.
pub fn cnn_spec() -> NetworkSpec {
    cnn_spec_with(InputShape { channels: 3, height: 9, width: 9 }, 0.5)
}

pub fn cnn_spec_with(input: InputShape, dropout: f32) -> NetworkSpec {
    let pool = LayerSpec::MaxPool { kernel: 2, stride: 2, ceil_mode: true };
    let h = pool_out(pool_out(input.height, 2, 2, true), 2, 2, true);
    let w = pool_out(pool_out(input.width, 2, 2, true), 2, 2, true);
    let flat = 32 * h * w;
    NetworkSpec::new(
        input,
        vec![
            LayerSpec::Conv { in_channels: input.channels, out_channels: 64, kernel: 3, padding: 1 },
            LayerSpec::BatchNorm { channels: 64 },
            LayerSpec::Relu,
            pool,
            LayerSpec::Conv { in_channels: 64, out_channels: 32, kernel: 3, padding: 1 },
            LayerSpec::BatchNorm { channels: 32 },
            LayerSpec::Relu,
            pool,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: flat, outputs: 60, activation: Activation::Relu },
            LayerSpec::Dropout { rate: dropout },
            LayerSpec::Dense { inputs: 60, outputs: 40, activation: Activation::Relu },
            LayerSpec::Dropout { rate: dropout },
            LayerSpec::Dense { inputs: 40, outputs: 2, activation: Activation::Identity },
            LayerSpec::Softmax,
        ],
    )
    .expect("cnn spec is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_weight_counts() {
        let spec = mlp_spec();
        assert_eq!(spec.input_len(), 243);
        assert_eq!(spec.weight_counts(), vec![9720, 800, 160, 16]);
        assert_eq!(spec.total_weights(), 10_696);
        assert!(spec.is_mlp());
    }

    #[test]
    fn cnn_weight_counts_and_maps() {
        let spec = cnn_spec();
        assert_eq!(spec.weight_counts(), vec![1728, 18_432, 17_280, 2400, 80]);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[0], Shape::Spatial { channels: 64, height: 9, width: 9 });
        assert_eq!(shapes[3], Shape::Spatial { channels: 64, height: 5, width: 5 });
        assert_eq!(shapes[4], Shape::Spatial { channels: 32, height: 5, width: 5 });
        assert_eq!(shapes[7], Shape::Spatial { channels: 32, height: 3, width: 3 });
        assert_eq!(shapes[8], Shape::Flat(288));
        assert!(!spec.is_mlp());
    }

    #[test]
    fn pool_arithmetic() {
        assert_eq!(pool_out(9, 2, 2, true), 5);
        assert_eq!(pool_out(5, 2, 2, true), 3);
        assert_eq!(pool_out(9, 2, 2, false), 4);
        assert_eq!(pool_out(4, 2, 2, true), 2);
        assert_eq!(pool_out(1, 2, 2, true), 1);
    }

    #[test]
    fn invalid_specs_rejected() {
        let input = InputShape { channels: 1, height: 2, width: 2 };
        let dense = |i, o| LayerSpec::Dense { inputs: i, outputs: o, activation: Activation::Identity };
        assert!(NetworkSpec::new(input, vec![dense(4, 2)]).is_err());
        assert!(NetworkSpec::new(input, vec![dense(4, 3), LayerSpec::Softmax]).is_err());
        assert!(NetworkSpec::new(input, vec![dense(5, 2), LayerSpec::Softmax]).is_err());
        assert!(NetworkSpec::new(input, vec![LayerSpec::Softmax, dense(4, 2)]).is_err());
        assert!(NetworkSpec::new(
            input,
            vec![LayerSpec::Flatten, LayerSpec::Conv { in_channels: 1, out_channels: 1, kernel: 1, padding: 0 }, LayerSpec::Softmax]
        )
        .is_err());
        assert!(NetworkSpec::new(input, vec![dense(4, 2), LayerSpec::Softmax]).is_ok());
    }
}
