//! Numeric kernels shared by the forward and backward passes. Matrices are
//! row-major and contiguous unless stated otherwise.

use super::Real;

/// Strided `C[m×n] = A[m×k]·B[k×n] + beta·C` with bounds checked against the slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(reach(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(reach(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
    assert!(reach(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    // SAFETY: the farthest element reachable through each (dims, strides) pair was
    // checked above; all strides are non-negative.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// `C[m×n] = A[m×k]·B[k×n]`.
pub(crate) fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), T::zero(), c, (n, 1));
}

/// `C[m×n] = A[m×k]·B[n×k]ᵀ`.
pub(crate) fn matmul_bt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, a, (k, 1), b, (1, k), T::zero(), c, (n, 1));
}

/// `C[m×n] = A[k×m]ᵀ·B[k×n]`.
pub(crate) fn matmul_at<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, a, (1, m), b, (n, 1), T::zero(), c, (n, 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    /// Columns of the unfolded matrix: `channels·k·k`, ordered `(ic·k + ky)·k + kx`.
    pub fn col_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Rows of the unfolded matrix: one per output position of every sample.
    pub fn rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Input coordinate for output `(oy, ox)` and tap `(ky, kx)`, or `None` in the zero padding.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy + ky).checked_sub(self.padding)?;
        let x = (ox + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds `input[N, C, H, W]` into `col[N·OH·OW, C·k·k]`.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, k, cl) = (g.out_h(), g.out_w(), g.kernel, g.col_len());
    let plane = g.height * g.width;
    let mut col = vec![T::zero(); g.rows() * cl];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut col[((n * oh + oy) * ow + ox) * cl..][..cl];
                for ic in 0..g.channels {
                    let src = &input[(n * g.channels + ic) * plane..][..plane];
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some((y, x)) = g.tap(oy, ox, ky, kx) {
                                row[(ic * k + ky) * k + kx] = src[y * g.width + x];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters `col` gradients back onto `[N, C, H, W]`.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, k, cl) = (g.out_h(), g.out_w(), g.kernel, g.col_len());
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.channels * plane];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &col[((n * oh + oy) * ow + ox) * cl..][..cl];
                for ic in 0..g.channels {
                    let dst = &mut out[(n * g.channels + ic) * plane..][..plane];
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some((y, x)) = g.tap(oy, ox, ky, kx) {
                                dst[y * g.width + x] += row[(ic * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, P, C]` (position-major rows) to `[N, C, P]` (channel planes).
pub(crate) fn rows_to_planes<T: Real>(rows: &[T], batch: usize, positions: usize, channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows.len()];
    for n in 0..batch {
        for p in 0..positions {
            for c in 0..channels {
                out[(n * channels + c) * positions + p] = rows[(n * positions + p) * channels + c];
            }
        }
    }
    out
}

/// Inverse of [`rows_to_planes`].
pub(crate) fn planes_to_rows<T: Real>(planes: &[T], batch: usize, positions: usize, channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes.len()];
    for n in 0..batch {
        for c in 0..channels {
            for p in 0..positions {
                out[(n * positions + p) * channels + c] = planes[(n * channels + c) * positions + p];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling; windows overhanging the border are clipped. Returns the output and,
/// per output element, the flat input index of the (first) maximum.
pub(crate) fn maxpool_forward<T: Real>(input: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let (ip, op) = (g.height * g.width, g.out_h * g.out_w);
    let mut out = Vec::with_capacity(g.batch * g.channels * op);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.batch * g.channels {
        let base = plane * ip;
        for oy in 0..g.out_h {
            let y0 = oy * g.stride;
            let y1 = (y0 + g.kernel).min(g.height);
            for ox in 0..g.out_w {
                let x0 = ox * g.stride;
                let x1 = (x0 + g.kernel).min(g.width);
                let mut best = base + y0 * g.width + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = base + y * g.width + x;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(grad_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

/// Per-channel statistics view: `x[n, c, s]` with `spatial` values per channel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BnGeom {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl BnGeom {
    #[inline]
    fn slice_range(&self, n: usize, c: usize) -> std::ops::Range<usize> {
        let start = (n * self.channels + c) * self.spatial;
        start..start + self.spatial
    }

    pub fn count(&self) -> usize {
        self.batch * self.spatial
    }
}

pub(crate) struct BnBatch<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

/// Normalizes with batch statistics.
pub(crate) fn bn_forward_train<T: Real>(x: &[T], g: &BnGeom, gamma: &[T], beta: &[T], eps: T) -> BnBatch<T> {
    let m = T::cast(g.count() as f64);
    let mut mean = vec![T::zero(); g.channels];
    let mut var = vec![T::zero(); g.channels];
    for c in 0..g.channels {
        let mut s = T::zero();
        for n in 0..g.batch {
            s += x[g.slice_range(n, c)].iter().copied().sum::<T>();
        }
        mean[c] = s / m;
        let mut q = T::zero();
        for n in 0..g.batch {
            q += x[g.slice_range(n, c)].iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
        }
        var[c] = q / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..g.batch {
        for c in 0..g.channels {
            for i in g.slice_range(n, c) {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    BnBatch { out, xhat, inv_std, mean, var }
}

/// Applies a per-channel affine map `y = scale·x + shift`.
pub(crate) fn channel_affine<T: Real>(x: &[T], g: &BnGeom, scale: &[T], shift: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..g.batch {
        for c in 0..g.channels {
            for i in g.slice_range(n, c) {
                out[i] = scale[c] * x[i] + shift[c];
            }
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Real>(
    dy: &[T],
    g: &BnGeom,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::cast(g.count() as f64);
    let mut dgamma = vec![T::zero(); g.channels];
    let mut dbeta = vec![T::zero(); g.channels];
    for n in 0..g.batch {
        for c in 0..g.channels {
            for i in g.slice_range(n, c) {
                dbeta[c] += dy[i];
                dgamma[c] += dy[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let k = gamma[c] * inv_std[c] / m;
            for i in g.slice_range(n, c) {
                dx[i] = k * (m * dy[i] - dbeta[c] - xhat[i] * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise log-softmax of `[N, K]` logits.
pub(crate) fn log_softmax<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        matmul(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        matmul_bt(m, k, n, &a, &transpose(k, n, &b), &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        matmul_at(m, k, n, &transpose(m, k, &a), &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { batch: 2, channels: 2, height: 4, width: 3, kernel: 3, padding: 1 };
        let x: Vec<f64> = (0..2 * 2 * 12).map(|i| (i as f64 * 0.7).sin()).collect();
        let col = im2col(&x, &g);
        let y: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // Center tap of the first row is the first pixel.
        assert_eq!(col[4], x[0]);
    }

    #[test]
    fn ceil_pool_clips_windows() {
        let g = PoolGeom { batch: 1, channels: 1, height: 3, width: 3, kernel: 2, stride: 2, out_h: 2, out_w: 2 };
        let x = [1.0, 5.0, 2.0, 3.0, 4.0, 9.0, 7.0, 0.0, 8.0];
        let (out, arg) = maxpool_forward(&x, &g);
        assert_eq!(out, vec![5.0, 9.0, 7.0, 8.0]);
        assert_eq!(arg, vec![1, 5, 6, 8]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let ls = log_softmax(&[1.0f64, 2.0, -3.0, 800.0], 2);
        for row in ls.chunks(2) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
