//! Reference implementations written directly from the definitions, with no
//! sharing of index tables, kernels or tape machinery with the library.
#![allow(dead_code)]

use hma_core::attention::AttentionParams;
use hma_core::{ImageF32, Tensor};

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn t(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    pub fn mul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows);
        let mut out = Mat::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for j in 0..o.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * o.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.at(i, i)).sum()
    }

    /// Columns `[c0, c1)`.
    pub fn cols_range(&self, c0: usize, c1: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, c1 - c0);
        for r in 0..self.rows {
            for c in c0..c1 {
                out.set(r, c - c0, self.at(r, c));
            }
        }
        out
    }
}

fn tensor_mat(t: &Tensor<f64>) -> Mat {
    let s = t.shape();
    Mat::new(s[0], s[1], t.data().to_vec())
}

/// `x W + b` for `x` of `T x Din`.
fn affine(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    let mut y = x.mul(&tensor_mat(w));
    for r in 0..y.rows {
        for c in 0..y.cols {
            y.data[r * y.cols + c] += b.data()[c];
        }
    }
    y
}

fn softmax_rows(m: &mut Mat) {
    for r in 0..m.rows {
        let row = &mut m.data[r * m.cols..(r + 1) * m.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Relative-position bias for head `h` between tokens `i` and `j` of an
/// `a x b` raster, read from a `(2a-1)(2b-1) x heads` table.
fn bias_value(p: &AttentionParams<f64>, a: usize, b: usize, i: usize, j: usize, h: usize) -> f64 {
    assert_eq!(p.bias.extent, (a, b));
    let (yi, xi) = ((i / b) as i64, (i % b) as i64);
    let (yj, xj) = ((j / b) as i64, (j % b) as i64);
    let row = (yi - yj + a as i64 - 1) * (2 * b as i64 - 1) + (xi - xj + b as i64 - 1);
    p.bias.table.data()[row as usize * p.heads + h]
}

/// `softmax(A B^T s + bias + mask) C` for one head.
fn attend(p: &AttentionParams<f64>, a: &Mat, b: &Mat, c: &Mat, scale: f64, h: usize, mask: Option<&[f64]>) -> Mat {
    let (ea, eb) = p.bias.extent;
    let mut logits = a.mul(&b.t());
    let t = logits.rows;
    for i in 0..t {
        for j in 0..t {
            let m = mask.map_or(0.0, |m| m[i * t + j]);
            let v = logits.at(i, j) * scale + bias_value(p, ea, eb, i, j, h) + m;
            logits.set(i, j, v);
        }
    }
    softmax_rows(&mut logits);
    logits.mul(c)
}

fn batch_mat(x: &Tensor<f64>, bi: usize) -> Mat {
    let (t, c) = (x.dim(1), x.dim(2));
    Mat::new(t, c, x.data()[bi * t * c..(bi + 1) * t * c].to_vec())
}

/// Dense window attention on `B x T x C`, mask `nW x T x T` applied as
/// `mask[b mod nW]`.
pub fn dense_msa(x: &Tensor<f64>, p: &AttentionParams<f64>, mask: Option<&Tensor<f64>>) -> Vec<f64> {
    let (bsz, t, c) = (x.dim(0), x.dim(1), x.dim(2));
    let d = c / p.heads;
    let mut out = Vec::with_capacity(bsz * t * c);
    for bi in 0..bsz {
        let xb = batch_mat(x, bi);
        let (q, k, v) = (affine(&xb, &p.wq, &p.bq), affine(&xb, &p.wk, &p.bk), affine(&xb, &p.wv, &p.bv));
        let mplane = mask.map(|m| {
            let nw = m.dim(0);
            &m.data()[(bi % nw) * t * t..(bi % nw + 1) * t * t]
        });
        let mut merged = Mat::zeros(t, c);
        for h in 0..p.heads {
            let (c0, c1) = (h * d, (h + 1) * d);
            let y = attend(p, &q.cols_range(c0, c1), &k.cols_range(c0, c1), &v.cols_range(c0, c1), 1.0 / (d as f64).sqrt(), h, mplane);
            for r in 0..t {
                for cc in 0..d {
                    merged.set(r, c0 + cc, y.at(r, cc));
                }
            }
        }
        out.extend(affine(&merged, &p.w_out, &p.b_out).data);
    }
    out
}

/// Dense two-stage grid attention on `B x T x C` groups with interaction
/// feature `g` of the same shape.
pub fn dense_grid_msa(f: &Tensor<f64>, g: &Tensor<f64>, p: &AttentionParams<f64>, legacy: bool) -> Vec<f64> {
    let (bsz, t, c) = (f.dim(0), f.dim(1), f.dim(2));
    let d = c / p.heads;
    let scale = if legacy { 1.0 / d as f64 } else { 1.0 / (d as f64).sqrt() };
    let mut out = Vec::with_capacity(bsz * t * c);
    for bi in 0..bsz {
        let fb = batch_mat(f, bi);
        let gb = batch_mat(g, bi);
        let (q, k, v) = (affine(&fb, &p.wq, &p.bq), affine(&fb, &p.wk, &p.bk), affine(&fb, &p.wv, &p.bv));
        let mut merged = Mat::zeros(t, c);
        for h in 0..p.heads {
            let (c0, c1) = (h * d, (h + 1) * d);
            let gh = gb.cols_range(c0, c1);
            let xhat = attend(p, &gh, &k.cols_range(c0, c1), &v.cols_range(c0, c1), scale, h, None);
            let y = attend(p, &q.cols_range(c0, c1), &gh, &xhat, scale, h, None);
            for r in 0..t {
                for cc in 0..d {
                    merged.set(r, c0 + cc, y.at(r, cc));
                }
            }
        }
        out.extend(affine(&merged, &p.w_out, &p.b_out).data);
    }
    out
}

/// Keys cubic convolution kernel, `a = -0.5`.
pub fn keys(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        1.5 * a * a * a - 2.5 * a * a + 1.0
    } else if a < 2.0 {
        -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Mirror index into `[0, n)` with edge repetition (`-1 -> 0`, `n -> n-1`).
fn mirror(j: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = j.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1-D interpolation weights of output sample `i` over all input
/// samples, folded back into range by mirroring.
pub fn weights_1d(i: usize, in_len: usize, scale: f64, antialias: bool) -> Vec<f64> {
    let centre = (i as f64 + 0.5) / scale - 0.5;
    let widen = antialias && scale < 1.0;
    let kernel = |x: f64| if widen { scale * keys(scale * x) } else { keys(x) };
    let reach = if widen { 2.0 / scale } else { 2.0 } + 1.0;
    let mut w = vec![0.0; in_len];
    let lo = (centre - reach).floor() as i64;
    let hi = (centre + reach).ceil() as i64;
    let mut total = 0.0;
    for j in lo..=hi {
        let k = kernel(centre - j as f64);
        total += k;
        w[mirror(j, in_len)] += k;
    }
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Full 2-D kernel sum per output pixel.
pub fn brute_resize(img: &ImageF32, out_h: usize, out_w: usize, antialias: bool) -> Vec<f64> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (sh, sw) = (out_h as f64 / h as f64, out_w as f64 / w as f64);
    let wy: Vec<Vec<f64>> = (0..out_h).map(|i| weights_1d(i, h, sh, antialias)).collect();
    let wx: Vec<Vec<f64>> = (0..out_w).map(|i| weights_1d(i, w, sw, antialias)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    if wy[oy][y] == 0.0 {
                        continue;
                    }
                    for x in 0..w {
                        s += wy[oy][y] * wx[ox][x] * img.get(y, x, ch) as f64;
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

/// Studio-swing luma plane.
pub fn y_plane(img: &ImageF32) -> Vec<f64> {
    (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (y, x)))
        .map(|(y, x)| {
            if img.channels() == 1 {
                img.get(y, x, 0) as f64
            } else {
                let (r, g, b) = (img.get(y, x, 0) as f64, img.get(y, x, 1) as f64, img.get(y, x, 2) as f64);
                (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
            }
        })
        .collect()
}

pub fn naive_psnr(a: &ImageF32, b: &ImageF32, crop: usize) -> f64 {
    let (ya, yb) = (y_plane(a), y_plane(b));
    let (h, w) = (a.height(), a.width());
    let mut se = 0.0;
    let mut n = 0usize;
    for y in crop..h - crop {
        for x in crop..w - crop {
            let d = ya[y * w + x] - yb[y * w + x];
            se += d * d;
            n += 1;
        }
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}

/// Mean SSIM with an explicit 11x11 Gaussian window sum at every valid
/// position.
pub fn naive_ssim(a: &ImageF32, b: &ImageF32, crop: usize) -> f64 {
    let (ya, yb) = (y_plane(a), y_plane(b));
    let (h, w) = (a.height(), a.width());
    let mut g = [[0.0f64; 11]; 11];
    let mut gs = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            gs += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in crop..=h - crop - 11 {
        for x0 in crop..=w - crop - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in g.iter().enumerate() {
                for (j, &gv) in row.iter().enumerate() {
                    let wgt = gv / gs;
                    let idx = (y0 + i) * w + x0 + j;
                    let (p, q) = (ya[idx], yb[idx]);
                    ma += wgt * p;
                    mb += wgt * q;
                    saa += wgt * p * p;
                    sbb += wgt * q * q;
                    sab += wgt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Linear CKA through the HSIC form: `HSIC(K, L) = tr(K H L H) / (n-1)^2`
/// with Gram matrices `K = X X^T`, `L = Y Y^T` and centring `H = I - 11^T/n`.
pub fn hsic_cka(x: &Mat, y: &Mat) -> f64 {
    let n = x.rows;
    let mut hm = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            hm.set(i, j, if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
        }
    }
    let k = x.mul(&x.t());
    let l = y.mul(&y.t());
    let hsic = |a: &Mat, b: &Mat| a.mul(&hm).mul(b).mul(&hm).trace() / ((n - 1) * (n - 1)) as f64;
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

pub mod grad_cases;
