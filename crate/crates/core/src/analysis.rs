//! Representation similarity: linear CKA over captured layer activations.

use std::fmt::Write as _;

use crate::attention::grid_unshuffle;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imaging::{degrade, extract_patches, ImageF32};
use crate::model::{HmaConfig, HmaModel, Taps};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `rows x cols` activations: one row per token, one column per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 || cols == 0 || rows * cols != data.len() {
            return Err(Error::invalid(
                "FeatureMatrix",
                format!("{rows}x{cols} with {} values (need at least 2 rows)", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("FeatureMatrix", "non-finite activation"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Column-centered copy and the sum of squares before centering.
    fn centered(&self) -> (Vec<f64>, f64) {
        let mut mean = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.rows as f64);
        let raw = self.data.iter().map(|v| v * v).sum();
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(self.cols) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        (out, raw)
    }
}

/// `A^T B` for row-major `n x p` and `n x q`.
fn cross(a: &[f64], p: usize, b: &[f64], q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for (ra, rb) in a.chunks_exact(p).zip(b.chunks_exact(q)) {
        for (i, &x) in ra.iter().enumerate() {
            for (o, &y) in out[i * q..(i + 1) * q].iter_mut().zip(rb) {
                *o += x * y;
            }
        }
    }
    out
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA `||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)` on column-centered
/// inputs. A representation that is constant (after centering, zero up to
/// rounding) has no similarity structure and yields 0.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::shape("linear_cka", &[x.rows, x.cols], &[y.rows, y.cols]));
    }
    let (xc, xraw) = x.centered();
    let (yc, yraw) = y.centered();
    let degenerate = |c: &[f64], raw: f64| frob_sq(c) <= 1e-24 * raw || frob_sq(c) < f64::MIN_POSITIVE;
    if degenerate(&xc, xraw) || degenerate(&yc, yraw) {
        return Ok(0.0);
    }
    let num = frob_sq(&cross(&yc, y.cols, &xc, x.cols));
    let den = frob_sq(&cross(&xc, x.cols, &xc, x.cols)).sqrt() * frob_sq(&cross(&yc, y.cols, &yc, y.cols)).sqrt();
    if !(den > 0.0) {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Layer paths that [`capture_features`] accepts for `cfg`.
pub fn available_selectors(cfg: &HmaConfig) -> Vec<String> {
    let mut out = vec!["conv_first".to_string()];
    for i in 0..cfg.n_rhtb {
        for j in 0..cfg.n_fab {
            out.push(format!("layers.{i}.fab.{j}.out"));
        }
        if cfg.use_gab {
            for p in ["g", "q", "k", "v"] {
                out.push(format!("layers.{i}.gab.grid.{p}"));
            }
            out.push(format!("layers.{i}.gab.out"));
        }
        out.push(format!("layers.{i}.out"));
    }
    out.push("body".into());
    out
}

/// Runs `probe` (`N x C_in x H x W`) through the model and returns, for each
/// selector, its activations flattened to tokens x channels. Rows follow the
/// raster order `(n, y, x)` for every layer, including the grid projections,
/// which are unshuffled back from their group order.
pub fn capture_features<T: Scalar>(
    model: &HmaModel<T>,
    probe: &Tensor<T>,
    selectors: &[String],
) -> Result<Vec<(String, FeatureMatrix)>> {
    let available = available_selectors(&model.config);
    for s in selectors {
        if !available.contains(s) {
            return Err(Error::UnknownSelector {
                selector: s.clone(),
                available: available.join(", "),
            });
        }
    }
    if probe.rank() != 4 {
        return Err(Error::invalid("capture_features", format!("probe must be NCHW, got {:?}", probe.shape())));
    }
    let (n, h, w) = (probe.dim(0), probe.dim(2), probe.dim(3));
    let mut tape = Tape::new();
    let x = tape.constant(probe.clone());
    let mut taps = Taps::new();
    model.forward_tape(&mut tape, x, Some(&mut taps))?;
    let k = model.config.grid_interval;
    selectors
        .iter()
        .map(|sel| {
            let var = taps
                .iter()
                .find(|(name, _)| name == sel)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::invalid("capture_features", format!("layer `{sel}` was not reached")))?;
            let t = tape.value(var);
            let tokens = match t.rank() {
                // NCHW feature map
                4 if sel == "conv_first" || sel == "body" => crate::ops::permute(t, &[0, 2, 3, 1])?,
                // grid groups x tokens x channels
                3 => {
                    let c = t.dim(2);
                    let grouped = t.clone().reshape(&[n * k * k, h / k, w / k, c])?;
                    grid_unshuffle(&grouped, k, h, w)?
                }
                _ => t.clone(),
            };
            let cols = *tokens.shape().last().unwrap();
            let rows = tokens.numel() / cols;
            let data = tokens.data().iter().map(|v| v.to_f64_lossy()).collect();
            Ok((sel.clone(), FeatureMatrix::new(rows, cols, data)?))
        })
        .collect()
}

/// Seeded probe batch: each image is degraded by `scale` and `per_image`
/// aligned `patch x patch` LR crops are drawn from it.
pub fn probe_batch<T: Scalar>(hr_images: &[ImageF32], scale: usize, patch: usize, per_image: usize, seed: u64) -> Result<Tensor<T>> {
    let mut crops = Vec::new();
    for (i, hr) in hr_images.iter().enumerate() {
        let (h, w) = hr.dims();
        let hr = hr.crop(0, 0, h - h % scale, w - w % scale)?;
        let lr = degrade(&hr, scale)?;
        for p in extract_patches(&hr, &lr, patch, per_image, seed.wrapping_add(i as u64))? {
            crops.push(p.lr);
        }
    }
    ImageF32::stack(&crops)
}

/// Pairwise CKA between two labeled feature sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaReport {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `values[r][c]` compares row feature `r` with column feature `c`.
    pub values: Vec<Vec<f64>>,
}

impl CkaReport {
    pub fn compute(rows: &[(String, FeatureMatrix)], cols: &[(String, FeatureMatrix)]) -> Result<Self> {
        let values = rows
            .iter()
            .map(|(_, a)| cols.iter().map(|(_, b)| linear_cka(a, b)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            row_labels: rows.iter().map(|(l, _)| l.clone()).collect(),
            col_labels: cols.iter().map(|(l, _)| l.clone()).collect(),
            values,
        })
    }

    /// Leading diagonal (square prefix for rectangular reports).
    pub fn diagonal(&self) -> Vec<f64> {
        self.values.iter().enumerate().filter_map(|(i, r)| r.get(i).copied()).collect()
    }

    /// Mean of the entries off the leading diagonal, if any.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let off: Vec<f64> = self
            .values
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, &v)| v))
            .collect();
        (!off.is_empty()).then(|| off.iter().sum::<f64>() / off.len() as f64)
    }

    /// Label row and column, six decimals per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for c in &self.col_labels {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            s.push_str(label);
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        FeatureMatrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .unwrap()
    }

    #[test]
    fn self_similarity_and_symmetry() {
        let x = random(10, 3, 1);
        let y = random(10, 5, 2);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (linear_cka(&x, &y).unwrap(), linear_cka(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn constant_features_give_zero() {
        let x = FeatureMatrix::from_fn(5, 2, |_, c| c as f64 + 3.0).unwrap();
        assert_eq!(linear_cka(&x, &random(5, 2, 3)).unwrap(), 0.0);
    }

    #[test]
    fn row_mismatch_rejected() {
        assert!(linear_cka(&random(4, 2, 0), &random(5, 2, 0)).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = CkaReport {
            row_labels: vec!["a".into(), "b".into()],
            col_labels: vec!["x".into(), "y".into()],
            values: vec![vec![1.0, 0.25], vec![0.5, 0.125]],
        };
        assert_eq!(r.to_csv(), "layer,x,y\na,1.000000,0.250000\nb,0.500000,0.125000\n");
        assert_eq!(r.diagonal(), vec![1.0, 0.125]);
        assert_eq!(r.off_diagonal_mean(), Some(0.375));
    }

    #[test]
    fn unknown_selector_lists_available() {
        let mut cfg = HmaConfig::toy();
        cfg.n_rhtb = 1;
        cfg.n_fab = 1;
        let m = HmaModel::<f32>::new(cfg, 0).unwrap();
        let probe = Tensor::zeros(&[1, 3, 8, 8]);
        let err = capture_features(&m, &probe, &["layers.9.out".into()]).unwrap_err().to_string();
        assert!(err.contains("layers.0.gab.grid.g"), "{err}");
    }
}
