//! Block-level forward passes over token maps `N x H x W x C`.

use std::collections::HashMap;

use super::config::HmaConfig;
use crate::attention::{
    grid_msa_parts, grid_shuffle_tape, grid_unshuffle_tape, msa_tape, shift_mask, window_partition_tape,
    window_reverse_tape, AttnVars, WindowSpec,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::LAYER_NORM_EPS;
use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Named intermediate activations recorded during a forward pass.
pub type Taps = Vec<(String, Var)>;

/// Forward-pass state: the tape, the parameters and optional activation taps.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub cfg: &'a HmaConfig,
    taps: Option<&'a mut Taps>,
    masks: HashMap<(usize, usize), Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, cfg: &'a HmaConfig) -> Self {
        Self {
            tape,
            store,
            cfg,
            taps: None,
            masks: HashMap::new(),
        }
    }

    pub fn with_taps(mut self, taps: &'a mut Taps) -> Self {
        self.taps = Some(taps);
        self
    }

    fn tap(&mut self, name: impl FnOnce() -> String, v: Var) {
        if let Some(t) = self.taps.as_deref_mut() {
            t.push((name(), v));
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name)
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.linear(x, w, Some(b))
    }

    pub fn norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Same-padded convolution on an NCHW map.
    pub fn conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let pad = self.tape.shape(w)[2] / 2;
        self.tape.conv2d(x, w, Some(b), 1, pad)
    }

    pub fn mlp(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?;
        let h = self.tape.gelu(h)?;
        self.linear(&format!("{prefix}.fc2"), h)
    }

    fn attn_vars(&mut self, prefix: &str, heads: usize, extent: usize) -> Result<AttnVars> {
        let pair = |ctx: &mut Self, p: &str| -> Result<(Var, Var)> {
            Ok((ctx.param(&format!("{prefix}.{p}.weight"))?, ctx.param(&format!("{prefix}.{p}.bias"))?))
        };
        Ok(AttnVars {
            q: pair(self, "q")?,
            k: pair(self, "k")?,
            v: pair(self, "v")?,
            proj: pair(self, "proj")?,
            table: self.param(&format!("{prefix}.bias_table"))?,
            extent: (extent, extent),
            heads,
        })
    }

    fn shift_mask(&mut self, h: usize, w: usize) -> Result<Var> {
        if let Some(&m) = self.masks.get(&(h, w)) {
            return Ok(m);
        }
        let spec = WindowSpec::shifted(self.cfg.window)?;
        let mask = shift_mask::<T>(spec, h, w)?.expect("shifted spec has a mask");
        let v = self.tape.constant(mask);
        self.masks.insert((h, w), v);
        Ok(v)
    }
}

fn dims(tape: &Tape<impl Scalar>, x: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(x) {
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(Error::invalid("block", format!("expected N x H x W x C tokens, got {s:?}"))),
    }
}

pub fn to_nchw<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 3, 1, 2])
}

pub fn to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 2, 3, 1])
}

/// Inverted-bottleneck convolution with squeeze-excitation, plus residual.
pub fn fused_conv_forward<T: Scalar>(ctx: &mut Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
    let n = ctx.norm(&format!("{prefix}.norm"), x)?;
    let t = to_nchw(ctx.tape, n)?;
    let e = ctx.conv(&format!("{prefix}.conv_expand"), t)?;
    let e = ctx.tape.gelu(e)?;
    let width = ctx.tape.shape(e)[1];
    let batch = ctx.tape.shape(e)[0];
    let pooled = ctx.tape.mean_axes(e, 2, 4)?;
    let pooled = ctx.tape.reshape(pooled, &[batch, width])?;
    let s = ctx.linear(&format!("{prefix}.se.reduce"), pooled)?;
    let s = ctx.tape.gelu(s)?;
    let s = ctx.linear(&format!("{prefix}.se.expand"), s)?;
    let gate = ctx.tape.sigmoid(s)?;
    let gate = ctx.tape.reshape(gate, &[batch, width, 1, 1])?;
    let e = ctx.tape.mul(e, gate)?;
    let p = ctx.conv(&format!("{prefix}.conv_project"), e)?;
    let p = to_tokens(ctx.tape, p)?;
    ctx.tape.add(p, x)
}

fn window_attention<T: Scalar>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    shifted: bool,
) -> Result<Var> {
    let (_, h, w, _) = dims(ctx.tape, x)?;
    let m = ctx.cfg.window;
    let spec = WindowSpec::new(m, if shifted { m / 2 } else { 0 })?;
    let mask = if shifted { Some(ctx.shift_mask(h, w)?) } else { None };
    let vars = ctx.attn_vars(prefix, heads, m)?;
    let wins = window_partition_tape(ctx.tape, x, spec)?;
    let a = msa_tape(ctx.tape, wins, &vars, (m, m), mask)?;
    window_reverse_tape(ctx.tape, a, spec, h, w)
}

/// Pre-norm Swin transformer layer.
pub fn stl_forward<T: Scalar>(ctx: &mut Ctx<T>, prefix: &str, x: Var, shifted: bool) -> Result<Var> {
    let ln = ctx.norm(&format!("{prefix}.norm1"), x)?;
    let heads = ctx.cfg.heads_fab;
    let a = window_attention(ctx, &format!("{prefix}.attn"), ln, heads, shifted)?;
    let f_n = ctx.tape.add(a, x)?;
    let ln = ctx.norm(&format!("{prefix}.norm2"), f_n)?;
    let m = ctx.mlp(&format!("{prefix}.mlp"), ln)?;
    ctx.tape.add(m, f_n)
}

pub fn fab_forward<T: Scalar>(ctx: &mut Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
    let mut y = x;
    if ctx.cfg.use_fused_conv {
        y = fused_conv_forward(ctx, &format!("{prefix}.fused"), y)?;
    }
    for k in 0..ctx.cfg.stl_per_fab {
        y = stl_forward(ctx, &format!("{prefix}.stl.{k}"), y, k % 2 == 1)?;
    }
    ctx.tap(|| format!("{prefix}.out"), y);
    Ok(y)
}

/// Mixed attention: window, shifted-window and grid branches over channel
/// splits, out-projected, post-normalized and added to the input.
/// `tap_prefix` names the grid projections (`{tap_prefix}.grid.{g,q,k,v}`).
pub fn mal_forward<T: Scalar>(ctx: &mut Ctx<T>, prefix: &str, tap_prefix: &str, x: Var) -> Result<Var> {
    let (n, h, w, c) = dims(ctx.tape, x)?;
    let cfg = ctx.cfg;
    let k = cfg.grid_interval;
    let f_g = ctx.tape.slice_last(x, 0, c / 2)?;
    let f_w1 = ctx.tape.slice_last(x, c / 2, 3 * c / 4)?;
    let f_w2 = ctx.tape.slice_last(x, 3 * c / 4, c)?;

    let x_w1 = window_attention(ctx, &format!("{prefix}.win1"), f_w1, cfg.heads_gab_win, false)?;
    let x_w2 = window_attention(ctx, &format!("{prefix}.win2"), f_w2, cfg.heads_gab_win, true)?;

    let (gh, gw) = (h / k, w / k);
    let groups = n * k * k;
    let sg = grid_shuffle_tape(ctx.tape, f_g, k)?;
    let sg = ctx.tape.reshape(sg, &[groups, gh * gw, c / 2])?;
    let full = grid_shuffle_tape(ctx.tape, x, k)?;
    let full = ctx.tape.reshape(full, &[groups, gh * gw, c])?;
    let g = ctx.linear(&format!("{prefix}.grid.g"), full)?;
    let vars = ctx.attn_vars(&format!("{prefix}.grid"), cfg.heads_gab_grid, cfg.grid_extent())?;
    let parts = grid_msa_parts(ctx.tape, sg, g, &vars, (gh, gw), cfg.legacy_grid_scale)?;
    for (name, v) in [("g", g), ("q", parts.q), ("k", parts.k), ("v", parts.v)] {
        ctx.tap(|| format!("{tap_prefix}.grid.{name}"), v);
    }
    let x_g = ctx.tape.reshape(parts.out, &[groups, gh, gw, c / 2])?;
    let x_g = grid_unshuffle_tape(ctx.tape, x_g, k, h, w)?;

    let cat = ctx.tape.concat_last(&[x_w1, x_w2, x_g])?;
    let p = ctx.linear(&format!("{prefix}.proj"), cat)?;
    let ln = ctx.norm(&format!("{prefix}.norm"), p)?;
    ctx.tape.add(ln, x)
}

/// Post-norm grid attention block.
pub fn gab_forward<T: Scalar>(ctx: &mut Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
    let f_m = mal_forward(ctx, &format!("{prefix}.mal"), prefix, x)?;
    let m = ctx.mlp(&format!("{prefix}.mlp"), f_m)?;
    let ln = ctx.norm(&format!("{prefix}.norm"), m)?;
    let out = ctx.tape.add(ln, f_m)?;
    ctx.tap(|| format!("{prefix}.out"), out);
    Ok(out)
}

/// Residual hybrid transformer block `i`.
pub fn rhtb_forward<T: Scalar>(ctx: &mut Ctx<T>, i: usize, x: Var) -> Result<Var> {
    let mut y = x;
    for j in 0..ctx.cfg.n_fab {
        y = fab_forward(ctx, &format!("layers.{i}.fab.{j}"), y)?;
    }
    if ctx.cfg.use_gab {
        y = gab_forward(ctx, &format!("layers.{i}.gab"), y)?;
    }
    let t = to_nchw(ctx.tape, y)?;
    let t = ctx.conv(&format!("layers.{i}.conv"), t)?;
    let t = to_tokens(ctx.tape, t)?;
    let out = ctx.tape.add(t, x)?;
    ctx.tap(|| format!("layers.{i}.out"), out);
    Ok(out)
}

/// Full network on an NCHW image batch.
pub fn hma_forward<T: Scalar>(ctx: &mut Ctx<T>, img: Var) -> Result<Var> {
    let (h, w) = match *ctx.tape.shape(img) {
        [_, c, h, w] if c == ctx.cfg.in_channels => (h, w),
        ref s => {
            return Err(Error::invalid(
                "hma_forward",
                format!("expected N x {} x H x W input, got {s:?}", ctx.cfg.in_channels),
            ))
        }
    };
    ctx.cfg.check_input(h, w)?;
    let f0 = ctx.conv("conv_first", img)?;
    ctx.tap(|| "conv_first".into(), f0);
    let mut x = to_tokens(ctx.tape, f0)?;
    for i in 0..ctx.cfg.n_rhtb {
        x = rhtb_forward(ctx, i, x)?;
    }
    let body = to_nchw(ctx.tape, x)?;
    let body = ctx.conv("conv_after_body", body)?;
    let f_rec = ctx.tape.add(body, f0)?;
    ctx.tap(|| "body".into(), f_rec);
    reconstruct(ctx, f_rec)
}

pub fn reconstruct<T: Scalar>(ctx: &mut Ctx<T>, f_rec: Var) -> Result<Var> {
    let mut y = ctx.conv("recon.conv_before", f_rec)?;
    for (k, r) in ctx.cfg.upsample_stages().into_iter().enumerate() {
        y = ctx.conv(&format!("recon.upsample.{k}"), y)?;
        y = ctx.tape.pixel_shuffle(y, r)?;
    }
    ctx.conv("recon.conv_last", y)
}
