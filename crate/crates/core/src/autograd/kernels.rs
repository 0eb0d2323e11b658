//! Raw slice kernels shared by the forward and backward passes.

use crate::scalar::Scalar;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // Innermost output axis is copied with a strided loop.
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_stride;
        }
        // odometer over the outer axes
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(batch: usize, c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            batch,
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }
}

/// Unfolds an NCHW batch into a `(c_in·k·k) × (batch·h_out·w_out)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); rows * cols];
    let plane = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &mut out[r * cols..(r + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut row[b * plane..(b + 1) * plane];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.w_out..][..g.w_out];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(cols_grad: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.cols();
    let plane = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &cols_grad[r * cols..(r + 1) * cols];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let src = &row[b * plane..(b + 1) * plane];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let src_row = &src[oy * g.w_out..][..g.w_out];
                        for (ox, &s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[c_out, batch·plane]` → `[batch, c_out, plane]`.
pub(crate) fn channels_to_batch_major<T: Scalar>(m: &[T], c_out: usize, batch: usize, plane: usize) -> Vec<T> {
    if batch == 1 {
        return m.to_vec();
    }
    let mut out = vec![T::zero(); m.len()];
    for co in 0..c_out {
        for b in 0..batch {
            let src = &m[co * batch * plane + b * plane..][..plane];
            out[(b * c_out + co) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

/// `[batch, c_out, plane]` → `[c_out, batch·plane]`.
pub(crate) fn batch_to_channels_major<T: Scalar>(t: &[T], c_out: usize, batch: usize, plane: usize) -> Vec<T> {
    if batch == 1 {
        return t.to_vec();
    }
    let mut out = vec![T::zero(); t.len()];
    for b in 0..batch {
        for co in 0..c_out {
            let src = &t[(b * c_out + co) * plane..][..plane];
            out[co * batch * plane + b * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Stable `ln(1 + exp(x))`.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
