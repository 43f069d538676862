//! Bias-free 2-D convolution lowered to a single GEMM over the whole batch.
//!
//! The patch matrix has one row per `(c_in, ki, kj)` and one column per
//! `(n, oh, ow)`, so the forward pass is `W[c_out, c_in*k*k] @ cols` followed
//! by a permutation into NCHW.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_ch, in_h, in_w] = *input else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                actual: input.to_vec(),
            });
        };
        let [out_ch, w_in, kh, kw] = *weight else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                actual: weight.to_vec(),
            });
        };
        if w_in != in_ch {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "input channels (input axis 1 vs weight axis 1)".into(),
                expected: w_in,
                actual: in_ch,
            });
        }
        if kh != kw {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "kernel width (weight axis 3)".into(),
                expected: kh,
                actual: kw,
            });
        }
        if stride == 0 || kh == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("stride {stride} and kernel {kh} must be positive"),
            });
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kh {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel {kh} exceeds padded input {in_h}x{in_w} (padding {padding})"),
            });
        }
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel: kh,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kh) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn patch_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn patch_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input coordinate for output coordinate `o` at kernel offset `kk`.
    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let hw_out = g.out_h * g.out_w;
    let ncols = g.patch_cols();
    let hw_in = g.in_h * g.in_w;
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let plane = &x[(n * g.in_ch + c) * hw_in..(n * g.in_ch + c + 1) * hw_in];
                    let dst = &mut dst_row[n * hw_out..(n + 1) * hw_out];
                    for oh in 0..g.out_h {
                        let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        match g.source(oh, ki, g.in_h) {
                            None => line.fill(T::zero()),
                            Some(ih) => {
                                let src = &plane[ih * g.in_w..(ih + 1) * g.in_w];
                                for (ow, v) in line.iter_mut().enumerate() {
                                    *v = match g.source(ow, kj, g.in_w) {
                                        Some(iw) => src[iw],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back onto the input gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let k = g.kernel;
    let hw_out = g.out_h * g.out_w;
    let ncols = g.patch_cols();
    let hw_in = g.in_h * g.in_w;
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let plane = &mut dx[(n * g.in_ch + c) * hw_in..(n * g.in_ch + c + 1) * hw_in];
                    let src = &src_row[n * hw_out..(n + 1) * hw_out];
                    for oh in 0..g.out_h {
                        let Some(ih) = g.source(oh, ki, g.in_h) else {
                            continue;
                        };
                        let line = &src[oh * g.out_w..(oh + 1) * g.out_w];
                        let dst = &mut plane[ih * g.in_w..(ih + 1) * g.in_w];
                        for (ow, &v) in line.iter().enumerate() {
                            if let Some(iw) = g.source(ow, kj, g.in_w) {
                                dst[iw] = dst[iw] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Permutes `(c, n, hw)` to `(n, c, hw)`.
fn channel_major_to_batch_major<T: Scalar>(src: &[T], batch: usize, ch: usize, hw: usize, dst: &mut [T]) {
    for c in 0..ch {
        for n in 0..batch {
            let from = (c * batch + n) * hw;
            let to = (n * ch + c) * hw;
            dst[to..to + hw].copy_from_slice(&src[from..from + hw]);
        }
    }
}

fn batch_major_to_channel_major<T: Scalar>(src: &[T], batch: usize, ch: usize, hw: usize, dst: &mut [T]) {
    for n in 0..batch {
        for c in 0..ch {
            let from = (n * ch + c) * hw;
            let to = (c * batch + n) * hw;
            dst[to..to + hw].copy_from_slice(&src[from..from + hw]);
        }
    }
}

impl ConvGeometry {
    /// Images per GEMM: enough to give roughly a thousand output columns,
    /// which keeps the patch matrix cache-resident.
    fn chunk(&self) -> usize {
        (1024 / (self.out_h * self.out_w).max(1)).clamp(1, self.batch.max(1))
    }

    fn with_batch(&self, batch: usize) -> Self {
        Self { batch, ..*self }
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the
    /// patch matrix of a single image.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeometry) -> Vec<T> {
    let rows = g.patch_rows();
    let hw = g.out_h * g.out_w;
    let in_len = g.in_ch * g.in_h * g.in_w;
    let out_len = g.out_ch * hw;
    let chunk = g.chunk();
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for start in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - start);
        let sub = g.with_batch(nb);
        let ncols = nb * hw;
        let xs = &x[start * in_len..(start + nb) * in_len];
        let b: &[T] = if nb == 1 && g.is_pointwise() {
            xs
        } else {
            cols.resize(rows * ncols, T::zero());
            im2col(xs, &sub, &mut cols);
            &cols
        };
        let dst = &mut out[start * out_len..(start + nb) * out_len];
        let c: &mut [T] = if nb == 1 {
            dst
        } else {
            tmp.resize(g.out_ch * ncols, T::zero());
            &mut tmp
        };
        T::gemm(
            g.out_ch,
            rows,
            ncols,
            T::one(),
            weight,
            (rows as isize, 1),
            b,
            (ncols as isize, 1),
            T::zero(),
            c,
            (ncols as isize, 1),
        );
        if nb > 1 {
            channel_major_to_batch_major(&tmp, nb, g.out_ch, hw, &mut out[start * out_len..(start + nb) * out_len]);
        }
    }
    out
}

/// Returns `(d_input, d_weight)`; either is skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_input_grad: bool,
    need_weight_grad: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = g.patch_rows();
    let hw = g.out_h * g.out_w;
    let in_len = g.in_ch * g.in_h * g.in_w;
    let out_len = g.out_ch * hw;
    let chunk = g.chunk();
    let mut dw = need_weight_grad.then(|| vec![T::zero(); g.out_ch * rows]);
    let mut dx = need_input_grad.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dy_cm = Vec::new();
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for start in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - start);
        let sub = g.with_batch(nb);
        let ncols = nb * hw;
        let dys = &dy[start * out_len..(start + nb) * out_len];
        let dyc: &[T] = if nb == 1 {
            dys
        } else {
            dy_cm.resize(out_len * nb, T::zero());
            batch_major_to_channel_major(dys, nb, g.out_ch, hw, &mut dy_cm);
            &dy_cm
        };
        let xs = &x[start * in_len..(start + nb) * in_len];

        if let Some(dw) = dw.as_mut() {
            let b: &[T] = if nb == 1 && g.is_pointwise() {
                xs
            } else {
                cols.resize(rows * ncols, T::zero());
                im2col(xs, &sub, &mut cols);
                &cols
            };
            // dW += dY[c_out, cols] @ patches^T
            T::gemm(
                g.out_ch,
                ncols,
                rows,
                T::one(),
                dyc,
                (ncols as isize, 1),
                b,
                (1, ncols as isize),
                T::one(),
                dw,
                (rows as isize, 1),
            );
        }

        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[start * in_len..(start + nb) * in_len];
            let direct = nb == 1 && g.is_pointwise();
            if !direct {
                dcols.resize(rows * ncols, T::zero());
            }
            let c: &mut [T] = if direct { dxs } else { &mut dcols };
            // dPatches = W^T @ dY
            T::gemm(
                rows,
                g.out_ch,
                ncols,
                T::one(),
                weight,
                (1, rows as isize),
                dyc,
                (ncols as isize, 1),
                T::zero(),
                c,
                (ncols as isize, 1),
            );
            if !direct {
                col2im(&dcols, &sub, dxs);
            }
        }
    }
    (dx, dw)
}
