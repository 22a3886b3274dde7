//! Separable bicubic resampling with MATLAB `imresize` semantics.

use super::ImageF32;
use crate::error::{Error, Result};

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let t = x.abs();
    let t2 = t * t;
    let t3 = t2 * t;
    if t <= 1.0 {
        1.5 * t3 - 2.5 * t2 + 1.0
    } else if t <= 2.0 {
        -0.5 * t3 + 2.5 * t2 - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// How taps falling outside the image are mapped back inside.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    /// Half-sample symmetric reflection (`cba|abc|cba`), as `imresize` does.
    #[default]
    Symmetric,
    /// Repeat the edge sample.
    Replicate,
}

/// Taps feeding one output sample along one axis. Weights sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Per-output-sample taps for resampling `in_len` samples to `out_len` at
/// `scale` (output/input). Output sample `i` (1-based) sits at input
/// coordinate `i/scale + (1 - 1/scale)/2`; when downscaling with `antialias`
/// the kernel is stretched by `1/scale`.
pub fn contributions(in_len: usize, out_len: usize, scale: f64, antialias: bool, padding: Padding) -> Vec<Contribution> {
    let shrink = antialias && scale < 1.0;
    let kernel_width = if shrink { 4.0 / scale } else { 4.0 };
    let taps = kernel_width.ceil() as i64 + 2;
    let n = in_len as i64;
    let map = |j: i64| -> usize {
        match padding {
            Padding::Replicate => j.clamp(0, n - 1) as usize,
            Padding::Symmetric => {
                let m = j.rem_euclid(2 * n);
                (if m < n { m } else { 2 * n - 1 - m }) as usize
            }
        }
    };
    (1..=out_len)
        .map(|i| {
            let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - kernel_width / 2.0).floor() as i64;
            let mut raw: Vec<(i64, f64)> = (0..taps)
                .map(|p| {
                    let j = left + p;
                    let d = u - j as f64;
                    let w = if shrink { scale * cubic(scale * d) } else { cubic(d) };
                    (j, w)
                })
                .collect();
            let sum: f64 = raw.iter().map(|&(_, w)| w).sum();
            raw.retain(|&(_, w)| w != 0.0);
            Contribution {
                // 1-based positions j map to 0-based sample j - 1
                indices: raw.iter().map(|&(j, _)| map(j - 1)).collect(),
                weights: raw.iter().map(|&(_, w)| w / sum).collect(),
            }
        })
        .collect()
}

/// Resizes to `out_h x out_w`, with scale taken as the size ratio per axis.
pub fn bicubic_resize(img: &ImageF32, out_h: usize, out_w: usize, antialias: bool) -> Result<ImageF32> {
    let (h, w) = img.dims();
    bicubic_resize_with(
        img,
        (out_h, out_w),
        (out_h as f64 / h as f64, out_w as f64 / w as f64),
        antialias,
        Padding::Symmetric,
    )
}

/// Fully parameterized resize. The axis with the smaller scale is processed
/// first, as `imresize` does.
pub fn bicubic_resize_with(
    img: &ImageF32,
    (out_h, out_w): (usize, usize),
    (scale_h, scale_w): (f64, f64),
    antialias: bool,
    padding: Padding,
) -> Result<ImageF32> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Image(format!("resize target {out_h}x{out_w} must be positive")));
    }
    if !(scale_h > 0.0 && scale_w > 0.0 && scale_h.is_finite() && scale_w.is_finite()) {
        return Err(Error::Image(format!("invalid resize scale {scale_h}x{scale_w}")));
    }
    let (h, w) = img.dims();
    let c = img.channels();
    let rows = contributions(h, out_h, scale_h, antialias, padding);
    let cols = contributions(w, out_w, scale_w, antialias, padding);
    let mut buf: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut dims = (h, w);
    if scale_h <= scale_w {
        buf = resample_rows(&buf, dims, c, &rows);
        dims.0 = out_h;
        buf = resample_cols(&buf, dims, c, &cols);
    } else {
        buf = resample_cols(&buf, dims, c, &cols);
        dims.1 = out_w;
        buf = resample_rows(&buf, dims, c, &rows);
    }
    ImageF32::new(out_w, out_h, c, buf.into_iter().map(|v| v as f32).collect())
}

fn resample_rows(src: &[f64], (_h, w): (usize, usize), c: usize, taps: &[Contribution]) -> Vec<f64> {
    let stride = w * c;
    let mut out = vec![0.0; taps.len() * stride];
    for (y, t) in taps.iter().enumerate() {
        let dst = &mut out[y * stride..(y + 1) * stride];
        for (&j, &wt) in t.indices.iter().zip(&t.weights) {
            for (d, &s) in dst.iter_mut().zip(&src[j * stride..(j + 1) * stride]) {
                *d += wt * s;
            }
        }
    }
    out
}

fn resample_cols(src: &[f64], (h, w): (usize, usize), c: usize, taps: &[Contribution]) -> Vec<f64> {
    let ow = taps.len();
    let mut out = vec![0.0; h * ow * c];
    for y in 0..h {
        let row = &src[y * w * c..(y + 1) * w * c];
        for (x, t) in taps.iter().enumerate() {
            let dst = &mut out[(y * ow + x) * c..(y * ow + x + 1) * c];
            for (&j, &wt) in t.indices.iter().zip(&t.weights) {
                for (d, &s) in dst.iter_mut().zip(&row[j * c..(j + 1) * c]) {
                    *d += wt * s;
                }
            }
        }
    }
    out
}

/// Bicubic degradation: scale factor and whether the kernel is widened.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    pub antialias: bool,
}

impl DegradationSpec {
    pub fn new(scale: usize) -> Result<Self> {
        if scale < 2 {
            return Err(Error::invalid("degrade", format!("scale must be at least 2, got {scale}")));
        }
        Ok(Self { scale, antialias: true })
    }

    /// Output is `ceil(H/s) x ceil(W/s)`, sampled at exactly `1/s`.
    pub fn apply(&self, img: &ImageF32) -> Result<ImageF32> {
        let s = self.scale;
        let (h, w) = img.dims();
        let inv = 1.0 / s as f64;
        bicubic_resize_with(img, (h.div_ceil(s), w.div_ceil(s)), (inv, inv), self.antialias, Padding::Symmetric)
    }
}

/// Antialiased bicubic downscaling by an integer factor.
pub fn degrade(img: &ImageF32, scale: usize) -> Result<ImageF32> {
    DegradationSpec::new(scale)?.apply(img)
}
