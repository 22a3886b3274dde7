//! Window partitioning, grid shuffling, relative position bias and the
//! multi-head attention kernels built on them.
//!
//! Feature maps here use token layout `N x H x W x C`. Every kernel has a
//! taped form (suffix `_tape`) used by the model, and a plain form for
//! stand-alone use.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::cached_index;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive logit penalty between tokens from different pre-shift regions.
pub const MASK_NEG: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(Error::invalid(
                "WindowSpec",
                format!("need 0 <= shift < window, got window {window}, shift {shift}"),
            ));
        }
        Ok(Self { window, shift })
    }

    /// Window of side `m` with the conventional half-window shift.
    pub fn shifted(m: usize) -> Result<Self> {
        Self::new(m, m / 2)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h % self.window != 0 || w % self.window != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "window_partition",
                format!("{h}x{w} map is not divisible by window {}", self.window),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub interval: usize,
    pub group_h: usize,
    pub group_w: usize,
}

impl GridSpec {
    pub fn new(interval: usize, h: usize, w: usize) -> Result<Self> {
        if interval == 0 || h == 0 || w == 0 || h % interval != 0 || w % interval != 0 {
            return Err(Error::invalid(
                "grid_shuffle",
                format!("{h}x{w} map is not divisible by interval {interval}"),
            ));
        }
        Ok(Self {
            interval,
            group_h: h / interval,
            group_w: w / interval,
        })
    }

    pub fn groups(&self) -> usize {
        self.interval * self.interval
    }

    pub fn tokens(&self) -> usize {
        self.group_h * self.group_w
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::invalid(op, format!("expected N x H x W x C tokens, got {shape:?}"))),
    }
}

fn window_index(n: usize, h: usize, w: usize, c: usize, spec: WindowSpec) -> Arc<Vec<u32>> {
    cached_index("window_partition", &[n, h, w, c, spec.window, spec.shift], || {
        let m = spec.window;
        let (nwy, nwx) = (h / m, w / m);
        let mut index = Vec::with_capacity(n * h * w * c);
        for b in 0..n {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    for ty in 0..m {
                        let y = (wy * m + ty + spec.shift) % h;
                        for tx in 0..m {
                            let x = (wx * m + tx + spec.shift) % w;
                            let base = ((b * h + y) * w + x) * c;
                            index.extend((base..base + c).map(|i| i as u32));
                        }
                    }
                }
            }
        }
        index
    })
}

fn invert(index: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; index.len()];
    for (dst, &src) in index.iter().enumerate() {
        inv[src as usize] = dst as u32;
    }
    inv
}

fn window_reverse_index(n: usize, h: usize, w: usize, c: usize, spec: WindowSpec) -> Arc<Vec<u32>> {
    cached_index("window_reverse", &[n, h, w, c, spec.window, spec.shift], || {
        invert(&window_index(n, h, w, c, spec))
    })
}

fn grid_index(n: usize, h: usize, w: usize, c: usize, k: usize) -> Arc<Vec<u32>> {
    cached_index("grid_shuffle", &[n, h, w, c, k], || {
        let (gh, gw) = (h / k, w / k);
        let mut index = Vec::with_capacity(n * h * w * c);
        for b in 0..n {
            for gi in 0..k {
                for gj in 0..k {
                    for a in 0..gh {
                        for bb in 0..gw {
                            let base = ((b * h + a * k + gi) * w + bb * k + gj) * c;
                            index.extend((base..base + c).map(|i| i as u32));
                        }
                    }
                }
            }
        }
        index
    })
}

fn grid_unshuffle_index(n: usize, h: usize, w: usize, c: usize, k: usize) -> Arc<Vec<u32>> {
    cached_index("grid_unshuffle", &[n, h, w, c, k], || invert(&grid_index(n, h, w, c, k)))
}

/// Splits a (cyclically rolled by `-shift`) token map into raster-ordered
/// windows: `N x H x W x C -> (N H W / M^2) x M^2 x C`.
pub fn window_partition_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: WindowSpec) -> Result<Var> {
    let (n, h, w, c) = dims4("window_partition", tape.shape(x))?;
    spec.check(h, w)?;
    let index = window_index(n, h, w, c, spec);
    tape.gather(x, index, &[n * h * w / spec.tokens(), spec.tokens(), c])
}

pub fn window_reverse_tape<T: Scalar>(tape: &mut Tape<T>, wins: Var, spec: WindowSpec, h: usize, w: usize) -> Result<Var> {
    spec.check(h, w)?;
    let shape = tape.shape(wins).to_vec();
    let per_image = h * w / spec.tokens();
    if shape.len() != 3 || shape[1] != spec.tokens() || shape[0] % per_image != 0 || shape[0] == 0 {
        return Err(Error::invalid(
            "window_reverse",
            format!("{shape:?} is not a set of {}-token windows tiling {h}x{w}", spec.tokens()),
        ));
    }
    let (n, c) = (shape[0] / per_image, shape[2]);
    let index = window_reverse_index(n, h, w, c, spec);
    tape.gather(wins, index, &[n, h, w, c])
}

/// Groups tokens by `(i mod K, j mod K)`: `N x H x W x C -> (N K^2) x H/K x W/K x C`.
pub fn grid_shuffle_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize) -> Result<Var> {
    let (n, h, w, c) = dims4("grid_shuffle", tape.shape(x))?;
    let g = GridSpec::new(k, h, w)?;
    let index = grid_index(n, h, w, c, k);
    tape.gather(x, index, &[n * g.groups(), g.group_h, g.group_w, c])
}

pub fn grid_unshuffle_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize, h: usize, w: usize) -> Result<Var> {
    let g = GridSpec::new(k, h, w)?;
    let shape = tape.shape(x).to_vec();
    let ok = shape.len() == 4
        && shape[0] % g.groups() == 0
        && shape[0] > 0
        && shape[1] == g.group_h
        && shape[2] == g.group_w;
    if !ok {
        return Err(Error::invalid(
            "grid_unshuffle",
            format!("{shape:?} does not match {} groups of {}x{}", g.groups(), g.group_h, g.group_w),
        ));
    }
    let (n, c) = (shape[0] / g.groups(), shape[3]);
    let index = grid_unshuffle_index(n, h, w, c, k);
    tape.gather(x, index, &[n, h, w, c])
}

fn untaped<T: Scalar>(x: &Tensor<T>, f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = f(&mut tape, v)?;
    Ok(tape.value(y).clone())
}

pub fn window_partition<T: Scalar>(x: &Tensor<T>, spec: WindowSpec) -> Result<Tensor<T>> {
    untaped(x, |t, v| window_partition_tape(t, v, spec))
}

pub fn window_reverse<T: Scalar>(wins: &Tensor<T>, spec: WindowSpec, h: usize, w: usize) -> Result<Tensor<T>> {
    untaped(wins, |t, v| window_reverse_tape(t, v, spec, h, w))
}

pub fn grid_shuffle<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    untaped(x, |t, v| grid_shuffle_tape(t, v, k))
}

pub fn grid_unshuffle<T: Scalar>(x: &Tensor<T>, k: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    untaped(x, |t, v| grid_unshuffle_tape(t, v, k, h, w))
}

/// Region ids used by the shifted-window mask, per token of each window.
fn shift_regions(spec: WindowSpec, h: usize, w: usize) -> Vec<Vec<usize>> {
    let (m, s) = (spec.window, spec.shift);
    let region = |v: usize, extent: usize| {
        if v + m < extent {
            0
        } else if v + s < extent {
            1
        } else {
            2
        }
    };
    let mut out = Vec::new();
    for wy in 0..h / m {
        for wx in 0..w / m {
            let mut ids = Vec::with_capacity(m * m);
            for ty in 0..m {
                for tx in 0..m {
                    ids.push(region(wy * m + ty, h) * 3 + region(wx * m + tx, w));
                }
            }
            out.push(ids);
        }
    }
    out
}

/// Additive mask `nW x T x T` for shifted windows over an `h x w` map, or
/// `None` when the spec is unshifted.
pub fn shift_mask<T: Scalar>(spec: WindowSpec, h: usize, w: usize) -> Result<Option<Tensor<T>>> {
    if spec.shift == 0 {
        return Ok(None);
    }
    spec.check(h, w)?;
    let regions = shift_regions(spec, h, w);
    let t = spec.tokens();
    let mut data = Vec::with_capacity(regions.len() * t * t);
    for ids in &regions {
        for &a in ids {
            for &b in ids {
                data.push(if a == b { T::zero() } else { T::of(MASK_NEG) });
            }
        }
    }
    Tensor::new(vec![regions.len(), t, t], data).map(Some)
}

/// Flat relative-position index for a query/key extent `a x b`, into a table
/// built for extent `ta x tb`. Offsets beyond the table are clamped to its edge.
pub fn relative_position_index(a: usize, b: usize, ta: usize, tb: usize) -> Vec<u32> {
    let clamp = |d: isize, t: usize| d.clamp(-(t as isize - 1), t as isize - 1) + t as isize - 1;
    let mut out = Vec::with_capacity(a * b * a * b);
    for qi in 0..a * b {
        let (qy, qx) = ((qi / b) as isize, (qi % b) as isize);
        for ki in 0..a * b {
            let (ky, kx) = ((ki / b) as isize, (ki % b) as isize);
            let dy = clamp(qy - ky, ta);
            let dx = clamp(qx - kx, tb);
            out.push((dy * (2 * tb as isize - 1) + dx) as u32);
        }
    }
    out
}

/// Learnable relative position bias over a token extent.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasTable<T> {
    /// `(2a - 1)(2b - 1) x heads`.
    pub table: Tensor<T>,
    pub extent: (usize, usize),
}

impl<T: Scalar> BiasTable<T> {
    pub fn zeros(extent: (usize, usize), heads: usize) -> Self {
        Self {
            table: Tensor::zeros(&[table_rows(extent), heads]),
            extent,
        }
    }

    pub fn heads(&self) -> usize {
        self.table.dim(1)
    }

    /// Dense bias `heads x T x T` for a query extent `a x b`.
    pub fn dense(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let index = bias_index(a, b, self.extent, self.heads());
        self.table.gather(&index, &[self.heads(), a * b, a * b])
    }
}

pub fn table_rows(extent: (usize, usize)) -> usize {
    (2 * extent.0 - 1) * (2 * extent.1 - 1)
}

fn bias_index(a: usize, b: usize, extent: (usize, usize), heads: usize) -> Arc<Vec<u32>> {
    cached_index("bias", &[a, b, extent.0, extent.1, heads], || {
        let rel = relative_position_index(a, b, extent.0, extent.1);
        let t2 = rel.len();
        let mut out = Vec::with_capacity(heads * t2);
        for h in 0..heads {
            out.extend(rel.iter().map(|&r| r * heads as u32 + h as u32));
        }
        out
    })
}

/// Tape handles of one attention unit's parameters. Linear weights are
/// `Din x Dout`.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub proj: (Var, Var),
    pub table: Var,
    pub extent: (usize, usize),
    pub heads: usize,
}

/// Plain-tensor attention parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub heads: usize,
    pub bias: BiasTable<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn channels(&self) -> usize {
        self.wq.dim(0)
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    /// Random projections (`U(-r, r)`) and bias table entries, for tests and probes.
    pub fn random(channels: usize, heads: usize, extent: (usize, usize), r: f64, rng: &mut impl rand::Rng) -> Self {
        let mut u = |shape: &[usize]| Tensor::uniform(shape, -r, r, rng);
        let (wq, bq, wk, bk) = (u(&[channels, channels]), u(&[channels]), u(&[channels, channels]), u(&[channels]));
        let (wv, bv, w_out, b_out) = (u(&[channels, channels]), u(&[channels]), u(&[channels, channels]), u(&[channels]));
        let table = u(&[table_rows(extent), heads]);
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            w_out,
            b_out,
            heads,
            bias: BiasTable { table, extent },
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> AttnVars {
        let mut c = |t: &Tensor<T>| tape.constant(t.clone());
        AttnVars {
            q: (c(&self.wq), c(&self.bq)),
            k: (c(&self.wk), c(&self.bk)),
            v: (c(&self.wv), c(&self.bv)),
            proj: (c(&self.w_out), c(&self.b_out)),
            table: c(&self.bias.table),
            extent: self.bias.extent,
            heads: self.heads,
        }
    }
}

fn check_heads(op: &'static str, channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::invalid(op, format!("{channels} channels not divisible by {heads} heads")));
    }
    Ok(channels / heads)
}

/// `B x T x C -> B x heads x T x d`.
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

fn bias_var<T: Scalar>(tape: &mut Tape<T>, p: &AttnVars, a: usize, b: usize) -> Result<Var> {
    let index = bias_index(a, b, p.extent, p.heads);
    let t = a * b;
    tape.gather(p.table, index, &[1, p.heads, t, t])
}

fn proj<T: Scalar>(tape: &mut Tape<T>, x: Var, wb: (Var, Var)) -> Result<Var> {
    tape.linear(x, wb.0, Some(wb.1))
}

/// `softmax(a b^T * scale + bias [+ mask]) c`, all `B x h x T x *`.
fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    c: Var,
    scale: T,
    bias: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let logits = tape.matmul(a, b, true)?;
    let attn = tape.attn_softmax(logits, scale, bias, mask)?;
    tape.matmul(attn, c, false)
}

/// Multi-head self-attention within windows `B x T x C`, `T = a x b` where
/// `(a, b)` is the token extent of each window.
pub fn msa_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttnVars,
    extent: (usize, usize),
    mask: Option<Var>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != extent.0 * extent.1 {
        return Err(Error::invalid("msa", format!("{s:?} is not B x {} x C", extent.0 * extent.1)));
    }
    let d = check_heads("msa", s[2], p.heads)?;
    let q = proj(tape, x, p.q)?;
    let k = proj(tape, x, p.k)?;
    let v = proj(tape, x, p.v)?;
    let (q, k, v) = (split_heads(tape, q, p.heads)?, split_heads(tape, k, p.heads)?, split_heads(tape, v, p.heads)?);
    let bias = bias_var(tape, p, extent.0, extent.1)?;
    let scale = T::one() / T::of(d as f64).sqrt();
    let y = attend(tape, q, k, v, scale, bias, mask)?;
    let y = merge_heads(tape, y)?;
    proj(tape, y, p.proj)
}

/// Intermediate projections of one grid attention call, `B x T x C` each.
#[derive(Clone, Copy, Debug)]
pub struct GridParts {
    pub out: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Two-stage grid attention over shuffled groups `B x T x C`, with `g` the
/// projected interaction feature of the same shape. `G` first gathers the
/// values (`X = softmax(G K^T s + B) V`), then distributes them to the
/// queries (`softmax(Q G^T s + B) X`). The scale is `1/sqrt(d)`, or `1/d`
/// when `legacy_scale` is set.
pub fn grid_msa_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f_g: Var,
    g: Var,
    p: &AttnVars,
    extent: (usize, usize),
    legacy_scale: bool,
) -> Result<Var> {
    grid_msa_parts(tape, f_g, g, p, extent, legacy_scale).map(|parts| parts.out)
}

pub fn grid_msa_parts<T: Scalar>(
    tape: &mut Tape<T>,
    f_g: Var,
    g: Var,
    p: &AttnVars,
    extent: (usize, usize),
    legacy_scale: bool,
) -> Result<GridParts> {
    let s = tape.shape(f_g).to_vec();
    if s.len() != 3 || s[1] != extent.0 * extent.1 {
        return Err(Error::invalid("grid_msa", format!("{s:?} is not B x {} x C", extent.0 * extent.1)));
    }
    if tape.shape(g) != s.as_slice() {
        return Err(Error::shape("grid_msa", &s, tape.shape(g)));
    }
    let d = check_heads("grid_msa", s[2], p.heads)?;
    let q = proj(tape, f_g, p.q)?;
    let k = proj(tape, f_g, p.k)?;
    let v = proj(tape, f_g, p.v)?;
    let (qh, kh, vh) = (split_heads(tape, q, p.heads)?, split_heads(tape, k, p.heads)?, split_heads(tape, v, p.heads)?);
    let gh = split_heads(tape, g, p.heads)?;
    let bias = bias_var(tape, p, extent.0, extent.1)?;
    let scale = if legacy_scale {
        T::one() / T::of(d as f64)
    } else {
        T::one() / T::of(d as f64).sqrt()
    };
    let xhat = attend(tape, gh, kh, vh, scale, bias, None)?;
    let y = attend(tape, qh, gh, xhat, scale, bias, None)?;
    let y = merge_heads(tape, y)?;
    let out = proj(tape, y, p.proj)?;
    Ok(GridParts { out, q, k, v })
}

/// Window attention on `B x T x C` windows; the window extent is the bias
/// table's extent.
pub fn msa<T: Scalar>(x: &Tensor<T>, p: &AttentionParams<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&mut tape);
    let mv = mask.map(|m| tape.constant(m.clone()));
    let y = msa_tape(&mut tape, xv, &vars, p.bias.extent, mv)?;
    Ok(tape.value(y).clone())
}

/// Grid attention on shuffled groups `B x gh x gw x C` (or `B x T x C` with
/// `T` matching the bias extent). `g` is the already projected interaction
/// feature.
pub fn grid_msa<T: Scalar>(f_g: &Tensor<T>, g: &Tensor<T>, p: &AttentionParams<T>, legacy_scale: bool) -> Result<Tensor<T>> {
    let s = f_g.shape();
    let (flat, extent) = match *s {
        [b, gh, gw, c] => (vec![b, gh * gw, c], (gh, gw)),
        [_, _, _] => (s.to_vec(), p.bias.extent),
        _ => return Err(Error::invalid("grid_msa", format!("unsupported shape {s:?}"))),
    };
    let mut tape = Tape::new();
    let fv = tape.constant(f_g.clone().reshape(&flat)?);
    let gv = tape.constant(g.clone().reshape(&flat).map_err(|_| Error::shape("grid_msa", s, g.shape()))?);
    let vars = p.bind(&mut tape);
    let y = grid_msa_tape(&mut tape, fv, gv, &vars, extent, legacy_scale)?;
    tape.value(y).clone().reshape(s)
}
