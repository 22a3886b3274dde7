//! Aligned patch sampling, geometric augmentation and synthetic textures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageF32;
use crate::error::{Error, Result};

/// A low-resolution patch and the high-resolution patch it was degraded from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: ImageF32,
    pub hr: ImageF32,
}

impl PatchPair {
    /// Integer factor between the two patches.
    pub fn scale(&self) -> usize {
        self.hr.width() / self.lr.width()
    }
}

fn scale_between(hr: &ImageF32, lr: &ImageF32) -> Result<usize> {
    let s = hr.width() / lr.width();
    if s == 0 || hr.width() != s * lr.width() || hr.height() != s * lr.height() {
        return Err(Error::Image(format!(
            "HR {}x{} is not an integer multiple of LR {}x{}",
            hr.height(),
            hr.width(),
            lr.height(),
            lr.width()
        )));
    }
    Ok(s)
}

/// `count` random aligned crops; the HR crop covers exactly the LR crop.
pub fn extract_patches(hr: &ImageF32, lr: &ImageF32, patch_lr: usize, count: usize, seed: u64) -> Result<Vec<PatchPair>> {
    let s = scale_between(hr, lr)?;
    let (h, w) = lr.dims();
    if patch_lr == 0 || patch_lr > h || patch_lr > w {
        return Err(Error::Image(format!("patch {patch_lr} does not fit a {h}x{w} LR image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let y = rng.random_range(0..=h - patch_lr);
            let x = rng.random_range(0..=w - patch_lr);
            Ok(PatchPair {
                lr: lr.crop(y, x, patch_lr, patch_lr)?,
                hr: hr.crop(s * y, s * x, s * patch_lr, s * patch_lr)?,
            })
        })
        .collect()
}

/// Horizontal flip (first) followed by `rot90` counter-clockwise quarter
/// turns, applied identically to both patches.
pub fn augment(pair: &PatchPair, flip: bool, rot90: u8) -> Result<PatchPair> {
    if rot90 > 3 {
        return Err(Error::invalid("augment", format!("rot90 must be 0..=3, got {rot90}")));
    }
    let apply = |img: &ImageF32| {
        let mut out = if flip { img.flip_h() } else { img.clone() };
        for _ in 0..rot90 {
            out = out.rot90();
        }
        out
    };
    Ok(PatchPair {
        lr: apply(&pair.lr),
        hr: apply(&pair.hr),
    })
}

/// Colored texture of four oriented sinusoids (periods of 3 to 12 pixels)
/// over a gentle gradient. The finest waves sit close to the Nyquist limit
/// of a 2x-downscaled copy, so bicubic upscaling alone stays well short of
/// a faithful reconstruction. Deterministic in `seed`.
pub fn synthetic_texture(height: usize, width: usize, seed: u64) -> Result<ImageF32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<([f64; 2], f64, [f64; 3])> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(3.0..12.0);
            let k = std::f64::consts::TAU / period;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = [(); 3].map(|_| rng.random_range(-0.12..0.12));
            ([k * theta.cos(), k * theta.sin()], phase, amp)
        })
        .collect();
    let base = [(); 3].map(|_| rng.random_range(0.35..0.65));
    let tilt = [(); 3].map(|_| rng.random_range(-0.15..0.15));
    let diag = (height + width).max(1) as f64;
    ImageF32::from_fn(width, height, 3, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c] + tilt[c] * (yf + xf) / diag;
        for (k, phase, amp) in &waves {
            v += amp[c] * (k[0] * xf + k[1] * yf + phase).sin();
        }
        v.clamp(0.0, 1.0) as f32
    })
}
