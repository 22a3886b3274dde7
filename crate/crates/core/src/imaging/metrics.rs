//! Luma-channel PSNR and SSIM.

use super::ImageF32;
use crate::error::{Error, Result};

/// Half-width of the 11x11 SSIM window.
pub const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn y_of(r: f64, g: f64, b: f64) -> f64 {
    (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

/// BT.601 studio-swing luma of an RGB image in `[0, 1]`.
pub fn rgb_to_y(img: &ImageF32) -> Result<ImageF32> {
    if img.channels() != 3 {
        return Err(Error::Image(format!("rgb_to_y needs 3 channels, got {}", img.channels())));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| y_of(p[0] as f64, p[1] as f64, p[2] as f64) as f32)
        .collect();
    ImageF32::new(img.width(), img.height(), 1, data)
}

/// Luma plane in f64: RGB is converted, single-channel images are taken as
/// luma already.
pub fn luma(img: &ImageF32) -> Vec<f64> {
    match img.channels() {
        3 => img
            .data()
            .chunks_exact(3)
            .map(|p| y_of(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect(),
        _ => img.data().iter().map(|&v| v as f64).collect(),
    }
}

/// Cropped luma planes of both images and their `(h, w)`.
fn cropped_pair(a: &ImageF32, b: &ImageF32, crop: usize, op: &str) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::Image(format!(
            "{op}: geometry mismatch {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let (h, w) = a.dims();
    if 2 * crop >= h || 2 * crop >= w {
        return Err(Error::Image(format!("{op}: border crop {crop} leaves nothing of {h}x{w}")));
    }
    let (ya, yb) = (luma(a), luma(b));
    let (ch, cw) = (h - 2 * crop, w - 2 * crop);
    let take = |p: &[f64]| -> Vec<f64> {
        (crop..h - crop)
            .flat_map(|y| p[y * w + crop..y * w + w - crop].iter().copied())
            .collect()
    };
    Ok((take(&ya), take(&yb), ch, cw))
}

/// `10 log10(1 / MSE)` on luma after removing `crop` pixels per border.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr_y(a: &ImageF32, b: &ImageF32, crop: usize) -> Result<f64> {
    let (ya, yb, _, _) = cropped_pair(a, b, crop, "psnr_y")?;
    let mse = ya.iter().zip(&yb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / ya.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Report form of a PSNR value; infinity prints as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(t, &g)| g * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, &g)| g * tmp[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every full 11x11 Gaussian window (`sigma = 1.5`) of the
/// cropped luma planes.
pub fn ssim_y(a: &ImageF32, b: &ImageF32, crop: usize) -> Result<f64> {
    let (ya, yb, h, w) = cropped_pair(a, b, crop, "ssim_y")?;
    let k = 2 * SSIM_RADIUS + 1;
    if h < k || w < k {
        return Err(Error::Image(format!("ssim_y: {h}x{w} after crop is smaller than the {k}x{k} window")));
    }
    let taps = gaussian_taps();
    let f = |p: &[f64]| filter_valid(p, h, w, &taps);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = f(&ya);
    let mu_b = f(&yb);
    let aa = f(&prod(&ya, &ya));
    let bb = f(&prod(&yb, &yb));
    let ab = f(&prod(&ya, &yb));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum();
    Ok(total / n as f64)
}
