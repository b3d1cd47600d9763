//! Layer kernels.
//!
//! Every function accepts either a single sample `[C, H, W]` or a batch in
//! channel-major layout `[C, B, H, W]`, and returns the same rank. Dense
//! layers take `[N]` or a feature-major batch `[N, B]`.

use alloc::vec;
use alloc::vec::Vec;

use super::{Real, Tensor};
use crate::{Error, Result};

/// Extents of a `[C, B, H, W]` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [c, h, w] => Ok(Dims { c, b: 1, h, w }),
            [c, b, h, w] => Ok(Dims { c, b, h, w }),
            _ => Err(Error::shape("[C, H, W] or [C, B, H, W]", shape)),
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Columns of the im2col matrix, one per (sample, pixel).
    pub fn positions(&self) -> usize {
        self.b * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.positions()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape_like(&self, rank: usize) -> Vec<usize> {
        if rank == 3 {
            vec![self.c, self.h, self.w]
        } else {
            vec![self.c, self.b, self.h, self.w]
        }
    }

    pub fn pooled(&self) -> Dims {
        Dims {
            h: self.h.div_ceil(2),
            w: self.w.div_ceil(2),
            ..*self
        }
    }
}

/// Copies `src` shifted by `shift - 1` columns into `dst`, zero-filling.
#[inline]
fn shifted_row<T: Real>(dst: &mut [T], src: &[T], shift: usize) {
    let w = dst.len();
    match shift {
        0 => {
            dst[0] = T::ZERO;
            dst[1..].copy_from_slice(&src[..w - 1]);
        }
        1 => dst.copy_from_slice(src),
        _ => {
            dst[..w - 1].copy_from_slice(&src[1..]);
            dst[w - 1] = T::ZERO;
        }
    }
}

#[inline]
fn accumulate_shifted_row<T: Real>(dst: &mut [T], src: &[T], shift: usize) {
    let w = dst.len();
    match shift {
        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
    }
}

/// Lowers a zero-padded 3×3 neighborhood into a `[C*9, B*H*W]` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], d: Dims, col: &mut Vec<T>) {
    let (h, w) = (d.h, d.w);
    let p = d.positions();
    col.clear();
    col.resize(d.c * 9 * p, T::ZERO);
    for ci in 0..d.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * p..][..p];
                for b in 0..d.b {
                    let src_plane = &x[(ci * d.b + b) * h * w..][..h * w];
                    for y in 0..h {
                        let dst = &mut row[(b * h + y) * w..][..w];
                        let sy = y + ky;
                        if sy == 0 || sy > h {
                            dst.fill(T::ZERO);
                        } else {
                            shifted_row(dst, &src_plane[(sy - 1) * w..][..w], kx);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Real>(col: &[T], d: Dims) -> Vec<T> {
    let (h, w) = (d.h, d.w);
    let p = d.positions();
    let mut gx = vec![T::ZERO; d.len()];
    for ci in 0..d.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * p..][..p];
                for b in 0..d.b {
                    let plane = &mut gx[(ci * d.b + b) * h * w..][..h * w];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy == 0 || sy > h {
                            continue;
                        }
                        // col[.., (y, x)] was read from x[sy - 1, x + kx - 1]
                        let dst = &mut plane[(sy - 1) * w..][..w];
                        accumulate_shifted_row(dst, &row[(b * h + y) * w..][..w], kx);
                    }
                }
            }
        }
    }
    gx
}

/// Convolution on raw buffers. Returns the output and the im2col matrix.
pub(crate) fn conv_forward_raw<T: Real>(x: &[T], d: Dims, kernels: &[T], bias: &[T], col: &mut Vec<T>) -> Vec<T> {
    let cout = bias.len();
    let k = d.c * 9;
    let p = d.positions();
    im2col(x, d, col);
    let mut out = vec![T::ZERO; cout * p];
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    T::gemm(cout, k, p, T::ONE, kernels, k, 1, col, p, 1, T::ONE, &mut out, p, 1);
    out
}

/// Convolution of a 1×1 map: with zero padding only the center taps see
/// the input, so the im2col matrix is skipped.
pub(crate) fn conv_forward_pointwise<T: Real>(x: &[T], d: Dims, kernels: &[T], bias: &[T]) -> Vec<T> {
    debug_assert!(d.h == 1 && d.w == 1);
    let cout = bias.len();
    let k = d.c * 9;
    let mut out = vec![T::ZERO; cout * d.b];
    for (co, row) in out.chunks_exact_mut(d.b).enumerate() {
        row.fill(bias[co]);
    }
    T::gemm(
        cout,
        d.c,
        d.b,
        T::ONE,
        &kernels[4..],
        k,
        9,
        x,
        d.b,
        1,
        T::ONE,
        &mut out,
        d.b,
        1,
    );
    out
}

/// Gradients of the convolution given its im2col matrix.
pub(crate) fn conv_backward_raw<T: Real>(
    col: &[T],
    d: Dims,
    kernels: &[T],
    cout: usize,
    grad_out: &[T],
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let k = d.c * 9;
    let p = d.positions();
    let mut gk = vec![T::ZERO; cout * k];
    // gK = gY · colᵀ
    T::gemm(cout, p, k, T::ONE, grad_out, p, 1, col, 1, p, T::ZERO, &mut gk, k, 1);
    let gb = grad_out
        .chunks_exact(p)
        .map(|row| row.iter().fold(T::ZERO, |a, &v| a + v))
        .collect();
    let gx = need_input_grad.then(|| {
        // gcol = Kᵀ · gY
        let mut gcol = vec![T::ZERO; k * p];
        T::gemm(
            k,
            cout,
            p,
            T::ONE,
            kernels,
            1,
            k,
            grad_out,
            p,
            1,
            T::ZERO,
            &mut gcol,
            p,
            1,
        );
        col2im(&gcol, d)
    });
    (gx, gk, gb)
}

fn check_kernels<T: Real>(d: Dims, kernels: &Tensor<T>, cout: usize) -> Result<()> {
    match *kernels.shape() {
        [co, ci, 3, 3] if co == cout && ci == d.c => Ok(()),
        [_, ci, 3, 3] if ci != d.c => Err(Error::shape(
            alloc::format!("kernels with {} input channels", d.c),
            kernels.shape(),
        )),
        _ => Err(Error::shape([cout, d.c, 3, 3], kernels.shape())),
    }
}

/// 3×3 cross-correlation with zero "same" padding, plus bias.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = Dims::from_shape(x.shape())?;
    let cout = bias.len();
    check_kernels(d, kernels, cout)?;
    let mut col = Vec::new();
    let out = conv_forward_raw(x.data(), d, kernels.data(), bias.data(), &mut col);
    Tensor::from_vec(&Dims { c: cout, ..d }.shape_like(x.rank()), out)
}

/// Returns `(grad_x, grad_kernels, grad_bias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = Dims::from_shape(x.shape())?;
    let cout = kernels.shape().first().copied().unwrap_or(0);
    check_kernels(d, kernels, cout)?;
    let expect = Dims { c: cout, ..d }.shape_like(x.rank());
    if grad_out.shape() != expect.as_slice() {
        return Err(Error::shape(expect, grad_out.shape()));
    }
    let mut col = Vec::new();
    im2col(x.data(), d, &mut col);
    let (gx, gk, gb) = conv_backward_raw(&col, d, kernels.data(), cout, grad_out.data(), true);
    Ok((
        Tensor::from_vec(x.shape(), gx.unwrap_or_default())?,
        Tensor::from_vec(kernels.shape(), gk)?,
        Tensor::from_vec(&[cout], gb)?,
    ))
}

/// 2×2 stride-2 ceil-mode max pooling on raw buffers; ragged edge windows
/// are kept. Also returns, for each output, the flat input index of its
/// maximum (first in row-major order on ties).
pub(crate) fn maxpool_forward_raw<T: Real>(x: &[T], d: Dims) -> (Vec<T>, Vec<usize>) {
    let o = d.pooled();
    let mut out = Vec::with_capacity(o.len());
    let mut argmax = Vec::with_capacity(o.len());
    for plane in 0..d.c * d.b {
        let base = plane * d.plane();
        for oy in 0..o.h {
            for ox in 0..o.w {
                let mut best = base + 2 * oy * d.w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(d.h) {
                    for xx in 2 * ox..(2 * ox + 2).min(d.w) {
                        let idx = base + y * d.w + xx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool_backward_raw<T: Real>(len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::ZERO; len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        gx[idx] += g;
    }
    gx
}

/// Returns the pooled tensor and the argmax record needed by
/// [`maxpool2d_backward`].
pub fn maxpool2d_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let d = Dims::from_shape(x.shape())?;
    if d.h == 0 || d.w == 0 {
        return Err(Error::invalid("pooling needs H, W >= 1"));
    }
    let (out, argmax) = maxpool_forward_raw(x.data(), d);
    Ok((Tensor::from_vec(&d.pooled().shape_like(x.rank()), out)?, argmax))
}

pub fn maxpool2d_backward<T: Real>(x_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let d = Dims::from_shape(x_shape)?;
    if grad_out.len() != argmax.len() || grad_out.len() != d.pooled().len() {
        return Err(Error::shape(d.pooled().shape_like(x_shape.len()), grad_out.shape()));
    }
    Tensor::from_vec(x_shape, maxpool_backward_raw(d.len(), argmax, grad_out.data()))
}

/// `y = W x + b` for a feature-major batch `x: [n, B]`.
pub(crate) fn dense_forward_raw<T: Real>(x: &[T], batch: usize, weights: &[T], bias: &[T]) -> Vec<T> {
    let m = bias.len();
    let n = x.len() / batch;
    let mut out = vec![T::ZERO; m * batch];
    for (row, &b) in out.chunks_exact_mut(batch).zip(bias) {
        row.fill(b);
    }
    T::gemm(
        m,
        n,
        batch,
        T::ONE,
        weights,
        n,
        1,
        x,
        batch,
        1,
        T::ONE,
        &mut out,
        batch,
        1,
    );
    out
}

pub(crate) fn dense_backward_raw<T: Real>(
    x: &[T],
    batch: usize,
    weights: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let n = x.len() / batch;
    let m = grad_out.len() / batch;
    let mut gw = vec![T::ZERO; m * n];
    T::gemm(
        m,
        batch,
        n,
        T::ONE,
        grad_out,
        batch,
        1,
        x,
        1,
        batch,
        T::ZERO,
        &mut gw,
        n,
        1,
    );
    let gb = grad_out
        .chunks_exact(batch)
        .map(|row| row.iter().fold(T::ZERO, |a, &v| a + v))
        .collect();
    let gx = need_input_grad.then(|| {
        let mut gx = vec![T::ZERO; n * batch];
        T::gemm(
            n,
            m,
            batch,
            T::ONE,
            weights,
            1,
            n,
            grad_out,
            batch,
            1,
            T::ZERO,
            &mut gx,
            batch,
            1,
        );
        gx
    });
    (gx, gw, gb)
}

fn dense_dims<T: Real>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, batch) = match *x.shape() {
        [n] => (n, 1),
        [n, b] => (n, b),
        _ => return Err(Error::shape("[N] or [N, B]", x.shape())),
    };
    match *weights.shape() {
        [m, wn] if wn == n => Ok((m, n, batch)),
        _ => Err(Error::shape(alloc::format!("[M, {n}]"), weights.shape())),
    }
}

pub fn dense_forward<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, _, batch) = dense_dims(x, weights)?;
    if bias.shape() != [m] {
        return Err(Error::shape([m], bias.shape()));
    }
    let out = dense_forward_raw(x.data(), batch, weights.data(), bias.data());
    let shape = if x.rank() == 1 { vec![m] } else { vec![m, batch] };
    Tensor::from_vec(&shape, out)
}

/// Returns `(grad_x, grad_weights, grad_bias)`.
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, _, batch) = dense_dims(x, weights)?;
    if grad_out.len() != m * batch {
        return Err(Error::shape([m, batch], grad_out.shape()));
    }
    let (gx, gw, gb) = dense_backward_raw(x.data(), batch, weights.data(), grad_out.data(), true);
    Ok((
        Tensor::from_vec(x.shape(), gx.unwrap_or_default())?,
        Tensor::from_vec(weights.shape(), gw)?,
        Tensor::from_vec(&[m], gb)?,
    ))
}

#[inline]
pub fn relu_scalar<T: Real>(v: T) -> T {
    if v > T::ZERO {
        v
    } else {
        T::ZERO
    }
}

/// Logistic function, evaluated through `exp(x) / (1 + exp(x))` for negative
/// inputs so it never overflows.
#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(relu_scalar)
}

/// ReLU derivative is taken as 0 at the origin.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(x.shape(), grad_out.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward pass of the sigmoid, given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::shape(y.shape(), grad_out.shape()));
    }
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::ONE - s))
        .collect();
    Tensor::from_vec(y.shape(), data)
}
