//! Images, degradation, quality metrics and patch sampling.
//!
//! Samples are stored row-major with interleaved channels. Float images hold
//! values nominally in `[0, 1]`; they are only clamped when quantized.

mod codec;
mod metrics;
mod patches;
mod resize;

pub use codec::{decode, encode_png, encode_ppm, load_image, save_image, ImageFormat};
pub use metrics::{format_db, luma, psnr_y, rgb_to_y, ssim_y, SSIM_RADIUS};
pub use patches::{augment, extract_patches, synthetic_texture, PatchPair};
pub use resize::{
    bicubic_resize, bicubic_resize_with, contributions, cubic, degrade, Contribution, DegradationSpec, Padding,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit image, RGB (3 channels) or grayscale (1 channel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

/// Float image with the same geometry conventions as [`ImageU8`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF32 {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

fn check_geometry(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::Image(format!("unsupported channel count {channels}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Image(format!("empty image {width}x{height}")));
    }
    if width * height * channels != len {
        return Err(Error::Image(format!(
            "{width}x{height}x{channels} image needs {} samples, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

macro_rules! geometry {
    () => {
        pub fn width(&self) -> usize {
            self.width
        }

        pub fn height(&self) -> usize {
            self.height
        }

        pub fn channels(&self) -> usize {
            self.channels
        }

        /// `(height, width)`.
        pub fn dims(&self) -> (usize, usize) {
            (self.height, self.width)
        }

        fn offset(&self, y: usize, x: usize, c: usize) -> usize {
            (y * self.width + x) * self.channels + c
        }
    };
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        check_geometry(width, height, channels, data.len())?;
        Ok(Self { width, height, channels, data })
    }

    geometry!();

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[self.offset(y, x, c)]
    }

    /// Maps `0..=255` onto `[0, 1]`.
    pub fn to_f32(&self) -> ImageF32 {
        ImageF32 {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }
}

impl ImageF32 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_geometry(width, height, channels, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Image(format!("non-finite sample at index {i}")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    geometry!();

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(y, x, c)]
    }

    /// Rounds to the nearest 8-bit level after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> ImageU8 {
        ImageU8 {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    /// Round-trips through 8 bits, as happens when an output is saved.
    pub fn quantized(&self) -> ImageF32 {
        self.to_u8().to_f32()
    }

    /// Copies the `h x w` window at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<ImageF32> {
        if h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return Err(Error::Image(format!(
                "crop {h}x{w} at ({y}, {x}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for row in y..y + h {
            let start = self.offset(row, x, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(ImageF32 { width: w, height: h, channels: c, data })
    }

    /// Mirror-pads (`dcb|abcd|cba`) the bottom and right edges.
    pub fn reflect_pad(&self, bottom: usize, right: usize) -> Result<ImageF32> {
        if (bottom > 0 && self.height < 2) || (right > 0 && self.width < 2) {
            return Err(Error::Image("reflect padding needs at least two pixels per padded axis".into()));
        }
        let reflect = |i: usize, n: usize| {
            let period = 2 * (n - 1).max(1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        let (h, w) = (self.height + bottom, self.width + right);
        Self::from_fn(w, h, self.channels, |y, x, c| {
            self.get(reflect(y, self.height), reflect(x, self.width), c)
        })
    }

    /// Mirror left-right.
    pub fn flip_h(&self) -> ImageF32 {
        let w = self.width;
        Self::from_fn(w, self.height, self.channels, |y, x, c| self.get(y, w - 1 - x, c)).unwrap()
    }

    /// Rotates counter-clockwise by 90 degrees.
    pub fn rot90(&self) -> ImageF32 {
        let w = self.width;
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| self.get(x, w - 1 - y, c)).unwrap()
    }

    /// `1 x C x H x W`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Self::stack(std::slice::from_ref(self)).expect("single image stacks")
    }

    /// Batches equally sized images into `N x C x H x W`.
    pub fn stack<T: Scalar>(images: &[ImageF32]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Image("empty batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(Error::Image(format!(
                    "batch mixes {}x{}x{} with {h}x{w}x{c}",
                    img.height, img.width, img.channels
                )));
            }
            for ch in 0..c {
                data.extend(img.data[ch..].iter().step_by(c).map(|&v| T::of(v as f64)));
            }
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Image `n` of an `N x C x H x W` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<ImageF32> {
        if t.rank() != 4 || n >= t.dim(0) {
            return Err(Error::Image(format!("cannot take image {n} from tensor {:?}", t.shape())));
        }
        let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
        let plane = &t.data()[n * c * h * w..(n + 1) * c * h * w];
        let mut data = vec![0f32; c * h * w];
        for ch in 0..c {
            for (p, &v) in plane[ch * h * w..(ch + 1) * h * w].iter().enumerate() {
                data[p * c + ch] = v.to_f64_lossy() as f32;
            }
        }
        ImageF32::new(w, h, c, data)
    }
}
