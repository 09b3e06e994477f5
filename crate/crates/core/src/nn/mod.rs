//! A small training engine for the two patch classifiers: dense, convolution,
//! max-pool, batch-norm, dropout, ReLU/sigmoid and a terminal softmax with
//! cross-entropy loss, trained by Adam with hand-written backprop.
//!
//! Everything is generic over [`Real`] so gradient checks can run in `f64` while
//! training and checkpoints use `f32`.

mod adam;
pub mod gradcheck;
mod network;
pub(crate) mod ops;
pub(crate) mod spec;
mod tensor;
mod train;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use adam::{adam_update, AdamConfig};
pub use network::{BnState, Gradients, InputNorm, LayerGrad, LayerState, Network, Tape, WeightState, BN_EPS, BN_MOMENTUM};
pub use spec::{cnn_spec, cnn_spec_with, mlp_spec, mlp_spec_for, Activation, InputShape, LayerSpec, NetworkSpec, Shape};
pub use tensor::Tensor;
pub use train::{train, NoHooks, TrainConfig, TrainHooks, TrainReport};

/// Floating-point element type of tensors and parameters.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn cast(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts to f64")
    }

    /// Raw strided GEMM `C = A·B + beta·C`.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the buffers behind `a`, `b` and `c`; see [`ops::gemm`].
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
