//! Forward and adjoint kernels for the differentiable operations.
//!
//! The public functions here are the plain (untaped) forms; [`crate::autodiff`]
//! records the same kernels and replays their adjoints.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], b: Option<&[usize]>, stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape("conv2d", x, w));
        }
        if x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        if let Some(b) = b {
            if b != [w[0]] {
                return Err(Error::shape("conv2d bias", b, &w[..1]));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(Self {
            n: x[0],
            cin: x[1],
            h,
            w: wd,
            cout: w[0],
            kh,
            kw,
            stride,
            pad,
            hout: (h + 2 * pad - kh) / stride + 1,
            wout: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.hout * self.wout
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let opix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * opix..(row + 1) * opix];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let opix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * opix..(row + 1) * opix];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wout + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_kernel<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let opix = g.out_pixels();
    let mut out = vec![T::zero(); g.n * g.cout * opix];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * opix]
    };
    for n in 0..g.n {
        let xin = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let dst = &mut out[n * g.cout * opix..(n + 1) * g.cout * opix];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(opix).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xin
        } else {
            im2col(xin, g, &mut col);
            &col
        };
        gemm(w, false, src, false, dst, g.cout, g.patch(), opix, b.is_some());
    }
    out
}

/// Returns `(dx, dw, db)` for `y = conv2d(x, w) + b`.
pub(crate) fn conv2d_adjoint<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let opix = g.out_pixels();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { g.patch() * opix }];
    let mut dcol = vec![T::zero(); if pointwise { 0 } else { g.patch() * opix }];
    for n in 0..g.n {
        let xin = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let dyn_ = &dy[n * g.cout * opix..(n + 1) * g.cout * opix];
        for (o, chunk) in dyn_.chunks(opix).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        let dxn = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        if pointwise {
            gemm(dyn_, false, xin, true, &mut dw, g.cout, opix, g.patch(), true);
            gemm(w, true, dyn_, false, dxn, g.patch(), g.cout, opix, true);
        } else {
            im2col(xin, g, &mut col);
            gemm(dyn_, false, &col, true, &mut dw, g.cout, opix, g.patch(), true);
            gemm(w, true, dyn_, false, &mut dcol, g.patch(), g.cout, opix, false);
            col2im(&dcol, g, dxn);
        }
    }
    (dx, dw, db)
}

/// 2-D convolution over NCHW input with OIHW weights and zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), b.map(|b| b.shape()), stride, pad)?;
    let out = conv2d_kernel(x.data(), w.data(), b.map(|b| b.data()), &g);
    Tensor::new(vec![g.n, g.cout, g.hout, g.wout], out)
}

pub(crate) fn linear_dims(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    if w.len() != 2 || x.is_empty() || *x.last().unwrap() != w[0] {
        return Err(Error::shape("linear", x, w));
    }
    if let Some(b) = b {
        if b != [w[1]] {
            return Err(Error::shape("linear bias", b, &w[1..]));
        }
    }
    let rows = x[..x.len() - 1].iter().product();
    Ok((rows, w[0], w[1]))
}

pub(crate) fn linear_kernel<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, rows: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = b {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b);
        }
    }
    gemm(x, false, w, false, &mut out, rows, din, dout, b.is_some());
    out
}

/// `y = x . w + b` over the last axis of `x`; `w` is `Din x Dout`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, din, dout) = linear_dims(x.shape(), w.shape(), b.map(|b| b.shape()))?;
    let out = linear_kernel(x.data(), w.data(), b.map(|b| b.data()), rows, din, dout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

/// Normalizes each last-axis slice; returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_kernel<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    width: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let inv_w = T::one() / T::of(width as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xs = &x[r * width..(r + 1) * width];
        let mean = xs.iter().copied().sum::<T>() * inv_w;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let xh = (xs[c] - mean) * rs;
            xhat[r * width + c] = xh;
            y[r * width + c] = xh * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

pub(crate) fn layer_norm_adjoint<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_w = T::one() / T::of(width as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); width];
    let mut dbeta = vec![T::zero(); width];
    for (r, &rs) in rstd.iter().enumerate() {
        let dys = &dy[r * width..(r + 1) * width];
        let xh = &xhat[r * width..(r + 1) * width];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for c in 0..width {
            let d = dys[c] * gamma[c];
            mean_d += d;
            mean_dx += d * xh[c];
            dgamma[c] += dys[c] * xh[c];
            dbeta[c] += dys[c];
        }
        mean_d *= inv_w;
        mean_dx *= inv_w;
        for c in 0..width {
            let d = dys[c] * gamma[c];
            dx[r * width + c] = rs * (d - mean_d - xh[c] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer normalization over the last axis followed by `gamma * xhat + beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let width = *x.shape().last().ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm", format!("eps must be positive, got {eps}")));
    }
    if gamma.shape() != [width] || beta.shape() != [width] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let (y, _, _) = layer_norm_kernel(x.data(), gamma.data(), beta.data(), width, T::of(eps));
    Tensor::new(x.shape().to_vec(), y)
}

pub(crate) fn softmax_kernel<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xs, ys) in x.chunks(width).zip(y.chunks_mut(width)) {
        let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in ys.iter_mut().zip(xs) {
            *o = (v - max).exp_fast();
            total += *o;
        }
        let inv = T::one() / total;
        for o in ys.iter_mut() {
            *o *= inv;
        }
    }
    y
}

pub(crate) fn softmax_adjoint<T: Scalar>(y: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((ys, dys), dxs) in y.chunks(width).zip(dy.chunks(width)).zip(dx.chunks_mut(width)) {
        let dot: T = ys.iter().zip(dys).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &dv) in dxs.iter_mut().zip(ys).zip(dys) {
            *o = yv * (dv - dot);
        }
    }
    dx
}

/// Softmax over the last axis, stabilized by subtracting the slice maximum.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let width = *x.shape().last().ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
    Tensor::new(x.shape().to_vec(), softmax_kernel(x.data(), width))
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp_fast() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Index map for pixel shuffle: `out[n, c, r*h + dy, r*w + dx] = in[n, c*r*r + dy*r + dx, h, w]`.
pub(crate) fn pixel_shuffle_index(shape: &[usize], r: usize) -> Result<(Vec<u32>, Vec<usize>)> {
    if shape.len() != 4 || r == 0 || shape[1] % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channels of {shape:?} not divisible by r^2 = {}", r * r),
        ));
    }
    let (n, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut index = Vec::with_capacity(n * cin * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                let (hy, dy) = (y / r, y % r);
                for x in 0..ow {
                    let (wx, dx) = (x / r, x % r);
                    let src_c = ch * r * r + dy * r + dx;
                    index.push((((b * cin + src_c) * h + hy) * w + wx) as u32);
                }
            }
        }
    }
    Ok((index, vec![n, c, oh, ow]))
}

/// Rearranges `N x (C r^2) x H x W` into `N x C x rH x rW`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (index, shape) = pixel_shuffle_index(x.shape(), r)?;
    x.gather(&index, &shape)
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let mut seen = vec![false; x.rank()];
    if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {} axes", x.rank())));
    }
    let (index, shape) = permute_index(x.shape(), perm);
    x.gather(&index, &shape)
}

type IndexKey = (&'static str, Vec<usize>);

static INDEX_CACHE: OnceLock<Mutex<HashMap<IndexKey, Arc<Vec<u32>>>>> = OnceLock::new();

/// Memoizes gather index maps, which depend only on geometry.
pub(crate) fn cached_index(tag: &'static str, key: &[usize], build: impl FnOnce() -> Vec<u32>) -> Arc<Vec<u32>> {
    let cache = INDEX_CACHE.get_or_init(Default::default);
    let k = (tag, key.to_vec());
    if let Some(v) = cache.lock().unwrap().get(&k) {
        return Arc::clone(v);
    }
    let v = Arc::new(build());
    cache.lock().unwrap().insert(k, Arc::clone(&v));
    v
}

/// Index map permuting axes of a tensor with the given shape.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<u32>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        index.push(offset as u32);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (index, out_shape)
}

/// Strides of `b` within the broadcast of `b` onto `a` (0 on broadcast axes).
pub(crate) fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape("broadcast", a, b));
    }
    let mut strides = vec![0usize; b.len()];
    let mut acc = 1usize;
    for ax in (0..b.len()).rev() {
        if b[ax] == a[ax] {
            strides[ax] = if b[ax] == 1 { 0 } else { acc };
        } else if b[ax] == 1 {
            strides[ax] = 0;
        } else {
            return Err(Error::shape("broadcast", a, b));
        }
        acc *= b[ax];
    }
    Ok(strides)
}

/// Calls `f(a_offset, b_offset, b_inner_stride, len)` for each innermost row of `a`.
pub(crate) fn for_each_broadcast_row(a: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let rank = a.len();
    if rank == 0 {
        f(0, 0, 0, 1);
        return;
    }
    let inner = a[rank - 1];
    let inner_stride = b_strides[rank - 1];
    let rows: usize = a[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank - 1];
    let mut b_off = 0usize;
    for r in 0..rows {
        f(r * inner, b_off, inner_stride, inner);
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            b_off += b_strides[ax];
            if counter[ax] < a[ax] {
                break;
            }
            b_off -= b_strides[ax] * a[ax];
            counter[ax] = 0;
        }
    }
}
