//! Dense kernels: 2-D cross-correlation and affine maps, with their adjoints.
//!
//! Layout is NCHW without the batch axis (`C×H×W`), row-major, zero padding.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [in_c, in_h, in_w] = *input_shape else {
            return Err(Error::Shape(format!(
                "conv input must be C×H×W, got {input_shape:?}"
            )));
        };
        let [out_c, w_in_c, kh, kw] = *weight_shape else {
            return Err(Error::Shape(format!(
                "conv weights must be out×in×kh×kw, got {weight_shape:?}"
            )));
        };
        if w_in_c != in_c {
            return Err(Error::Shape(format!(
                "conv expects {w_in_c} input channels, got {in_c}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let pad2 = padding
            .checked_mul(2)
            .ok_or_else(|| Error::Shape(format!("conv padding {padding} overflows")))?;
        let (Some(span_h), Some(span_w)) = (in_h.checked_add(pad2), in_w.checked_add(pad2)) else {
            return Err(Error::Shape(format!("conv padding {padding} overflows")));
        };
        if kh == 0 || kw == 0 || span_h < kh || span_w < kw {
            return Err(Error::Shape(format!(
                "conv kernel {kh}×{kw} does not fit padded input {span_h}×{span_w}"
            )));
        }
        Ok(Self {
            in_channels: in_c,
            out_channels: out_c,
            kernel_h: kh,
            kernel_w: kw,
            in_h,
            in_w,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
            stride,
            padding,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.out_h, self.out_w]
    }

    /// Output columns `ox` for which input column `ox*stride + k - padding`
    /// falls inside `0..in_w`, as a half-open range.
    #[inline]
    fn valid_range(k: usize, stride: usize, padding: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // ox*stride + k >= padding
        let lo = if k >= padding {
            0
        } else {
            (padding - k).div_ceil(stride)
        };
        // ox*stride + k - padding <= in_len - 1
        let hi = if in_len + padding > k {
            ((in_len + padding - k - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Cross-correlation of a `C×H×W` input with `O×C×kh×kw` weights plus a
/// per-output-channel bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    if bias.len() != g.out_channels {
        return Err(Error::Shape(format!(
            "conv bias has {} entries for {} output channels",
            bias.len(),
            g.out_channels
        )));
    }
    let mut out = vec![T::zero(); g.out_channels * g.out_h * g.out_w];
    conv2d_raw(&g, input.data(), weights.data(), Some(bias.data()), &mut out);
    Tensor::new(g.output_shape(), out)
}

/// Forward kernel on raw slices; accumulates into `out` after seeding it with
/// the bias (or zero).
pub fn conv2d_raw<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weights: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let plane = g.out_h * g.out_w;
    for (co, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias.map_or(T::zero(), |b| b[co]);
        chunk.iter_mut().for_each(|v| *v = b);
    }
    for co in 0..g.out_channels {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..g.in_channels {
            let in_plane = &input[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..g.kernel_h {
                let (oy0, oy1) = ConvGeometry::valid_range(ky, g.stride, g.padding, g.in_h, g.out_h);
                for kx in 0..g.kernel_w {
                    let w = weights[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                    if w == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = ConvGeometry::valid_range(kx, g.stride, g.padding, g.in_w, g.out_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let out_row = &mut out_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            for (o, &i) in out_row[ox0..ox1].iter_mut().zip(&in_row[ix0..]) {
                                *o += w * i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                out_row[ox] += w * in_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of the conv's linear part: maps an output-space vector back to
/// input space (`Wᵀ·v`). Used for input gradients and backward bound
/// substitution.
pub fn conv2d_transpose_raw<T: Scalar>(g: &ConvGeometry, grad_out: &[T], weights: &[T], grad_in: &mut [T]) {
    let plane = g.out_h * g.out_w;
    grad_in.iter_mut().for_each(|v| *v = T::zero());
    for co in 0..g.out_channels {
        let go_plane = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..g.in_channels {
            let gi_plane = &mut grad_in[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..g.kernel_h {
                let (oy0, oy1) = ConvGeometry::valid_range(ky, g.stride, g.padding, g.in_h, g.out_h);
                for kx in 0..g.kernel_w {
                    let w = weights[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                    if w == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = ConvGeometry::valid_range(kx, g.stride, g.padding, g.in_w, g.out_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let gi_row = &mut gi_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let go_row = &go_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            for (i, &o) in gi_row[ix0..].iter_mut().zip(&go_row[ox0..ox1]) {
                                *i += w * o;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                gi_row[ox * g.stride + kx - g.padding] += w * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `dL/dW` and `dL/db` for one sample into `grad_w` / `grad_b`.
pub fn conv2d_weight_grad_raw<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    let plane = g.out_h * g.out_w;
    for co in 0..g.out_channels {
        let go_plane = &grad_out[co * plane..(co + 1) * plane];
        let mut gb = T::zero();
        for &v in go_plane {
            gb += v;
        }
        grad_b[co] += gb;
        for ci in 0..g.in_channels {
            let in_plane = &input[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..g.kernel_h {
                let (oy0, oy1) = ConvGeometry::valid_range(ky, g.stride, g.padding, g.in_h, g.out_h);
                for kx in 0..g.kernel_w {
                    let (ox0, ox1) = ConvGeometry::valid_range(kx, g.stride, g.padding, g.in_w, g.out_w);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let go_row = &go_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            for (&o, &i) in go_row[ox0..ox1].iter().zip(&in_row[ix0..]) {
                                acc += o * i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                acc += go_row[ox] * in_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                    grad_w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx] += acc;
                }
            }
        }
    }
}

/// `y = W·x + b` with `W` stored `out×in`.
pub fn linear_raw<T: Scalar>(weights: &[T], bias: Option<&[T]>, input: &[T], out: &mut [T]) {
    let n_in = input.len();
    for (o, row) in out.iter_mut().zip(weights.chunks(n_in)) {
        let mut acc = T::zero();
        for (&w, &x) in row.iter().zip(input) {
            acc += w * x;
        }
        *o = acc;
    }
    if let Some(b) = bias {
        for (o, &b) in out.iter_mut().zip(b) {
            *o += b;
        }
    }
}

/// `Wᵀ·v` with `W` stored `out×in`.
pub fn linear_transpose_raw<T: Scalar>(weights: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let n_in = grad_in.len();
    grad_in.iter_mut().for_each(|v| *v = T::zero());
    for (&g, row) in grad_out.iter().zip(weights.chunks(n_in)) {
        if g == T::zero() {
            continue;
        }
        for (gi, &w) in grad_in.iter_mut().zip(row) {
            *gi += g * w;
        }
    }
}
