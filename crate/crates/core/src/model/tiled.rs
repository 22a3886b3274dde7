//! Inference on arbitrarily sized images by overlapping tiles.

use super::network::HmaModel;
use crate::error::{Error, Result};
use crate::imaging::ImageF32;
use crate::scalar::Scalar;

/// Tile origins along one axis and the padded length they cover.
fn tile_origins(len: usize, tile: usize, stride: usize) -> (Vec<usize>, usize) {
    if len <= tile {
        return (vec![0], tile);
    }
    let n = (len - tile).div_ceil(stride) + 1;
    ((0..n).map(|i| i * stride).collect(), tile + (n - 1) * stride)
}

/// Reflect-pads `img` to a whole number of `tile x tile` windows spaced
/// `tile - overlap` apart, super-resolves each window, averages the
/// overlapping outputs and crops to `sH x sW`.
pub fn tiled_inference<T: Scalar>(img: &ImageF32, model: &HmaModel<T>, tile: usize, overlap: usize) -> Result<ImageF32> {
    let cfg = &model.config;
    let g = cfg.granularity();
    if tile < g || tile % g != 0 {
        return Err(Error::invalid(
            "tiled_inference",
            format!("tile {tile} must be a positive multiple of {g} (lcm of window and grid interval)"),
        ));
    }
    if overlap >= tile {
        return Err(Error::invalid("tiled_inference", format!("overlap {overlap} must be smaller than tile {tile}")));
    }
    if img.channels() != cfg.in_channels {
        return Err(Error::invalid(
            "tiled_inference",
            format!("model expects {} channels, image has {}", cfg.in_channels, img.channels()),
        ));
    }
    let stride = tile - overlap;
    let (h, w) = img.dims();
    let (ys, ph) = tile_origins(h, tile, stride);
    let (xs, pw) = tile_origins(w, tile, stride);
    let padded = if (ph, pw) == (h, w) { img.clone() } else { img.reflect_pad(ph - h, pw - w)? };

    let s = cfg.scale;
    let c = img.channels();
    let (oh, ow, st) = (ph * s, pw * s, tile * s);
    let mut acc = vec![0f64; oh * ow * c];
    let mut hits = vec![0u32; oh * ow];
    for &y in &ys {
        for &x in &xs {
            let patch = padded.crop(y, x, tile, tile)?;
            let out = model.forward(&patch.to_tensor::<T>())?;
            let out = ImageF32::from_tensor(&out, 0)?;
            for ty in 0..st {
                let row = (y * s + ty) * ow + x * s;
                for tx in 0..st {
                    hits[row + tx] += 1;
                    for ch in 0..c {
                        acc[(row + tx) * c + ch] += out.get(ty, tx, ch) as f64;
                    }
                }
            }
        }
    }
    let blended: Vec<f32> = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / hits[i / c] as f64) as f32)
        .collect();
    ImageF32::new(ow, oh, c, blended)?.crop(0, 0, h * s, w * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_cover_axis() {
        assert_eq!(tile_origins(64, 64, 48), (vec![0], 64));
        assert_eq!(tile_origins(70, 64, 48), (vec![0, 48], 112));
        assert_eq!(tile_origins(10, 16, 8), (vec![0], 16));
        let (o, len) = tile_origins(100, 32, 24);
        assert!(len >= 100 && o.last().unwrap() + 32 == len);
    }
}
