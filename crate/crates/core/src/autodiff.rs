//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node holding
//! its value and whatever the adjoint needs. [`Tape::backward`] walks the
//! nodes in reverse execution order, summing contributions for values that
//! feed several consumers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::param::ParamStore;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    Add { a: usize, b: usize, b_strides: Vec<usize> },
    Mul { a: usize, b: usize, b_strides: Vec<usize> },
    Scale { x: usize, k: T },
    MatMul { a: usize, b: usize, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, din: usize, dout: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    LayerNorm { x: usize, g: usize, b: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: usize },
    AttnSoftmax { x: usize, bias: usize, scale: T },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Gather { x: usize, index: Arc<Vec<u32>> },
    Reshape { x: usize },
    ConcatLast { parts: Vec<(usize, usize)> },
    Mean { x: usize, outer: usize, mid: usize, inner: usize },
    Sum { x: usize },
    L1 { a: usize, b: usize },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Single-writer record of one forward pass.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        let g = self.grads.get(v.idx)?.as_ref()?;
        Tensor::new(self.shapes[v.idx].clone(), g.clone()).ok()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad, None)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool, param: Option<String>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var { tape: self.id, idx }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (retrievable through [`Gradients::get`]).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`; repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.shared(name)?;
        let v = self.push_shared(value, Op::Leaf, true, Some(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let b_strides = ops::broadcast_strides(av.shape(), bv.shape())?;
        let mut out = av.data().to_vec();
        let bd = bv.data();
        ops::for_each_broadcast_row(av.shape(), &b_strides, |ao, bo, bs, len| {
            let row = &mut out[ao..ao + len];
            if bs == 0 {
                let v = bd[bo];
                row.iter_mut().for_each(|o| *o += v);
            } else {
                row.iter_mut().zip(&bd[bo..bo + len]).for_each(|(o, &v)| *o += v);
            }
        });
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Add { a: ia, b: ib, b_strides }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let b_strides = ops::broadcast_strides(av.shape(), bv.shape())?;
        let mut out = av.data().to_vec();
        let bd = bv.data();
        ops::for_each_broadcast_row(av.shape(), &b_strides, |ao, bo, bs, len| {
            let row = &mut out[ao..ao + len];
            if bs == 0 {
                let v = bd[bo];
                row.iter_mut().for_each(|o| *o *= v);
            } else {
                row.iter_mut().zip(&bd[bo..bo + len]).for_each(|(o, &v)| *o *= v);
            }
        });
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Mul { a: ia, b: ib, b_strides }, rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.map(|v| v * k);
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Scale { x: ix, k }, rg))
    }

    /// Batched matrix product over the two trailing axes; leading axes must agree.
    /// With `trans_b`, `b` is stored as `[..., n, k]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let (ad, bd) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                &ad[bi * m * k..(bi + 1) * m * k],
                false,
                &bd[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::MatMul { a: ia, b: ib, trans_b, batch, m, k, n }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let bv = ib.map(|i| self.nodes[i].value.as_ref());
        let (rows, din, dout) = ops::linear_dims(xv.shape(), wv.shape(), bv.map(|b| b.shape()))?;
        let out = ops::linear_kernel(xv.data(), wv.data(), bv.map(|b| b.data()), rows, din, dout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        Ok(self.push(t, Op::Linear { x: ix, w: iw, b: ib, rows, din, dout }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let bv = ib.map(|i| self.nodes[i].value.as_ref());
        let geom = ConvGeom::new(xv.shape(), wv.shape(), bv.map(|b| b.shape()), stride, pad)?;
        let out = ops::conv2d_kernel(xv.data(), wv.data(), bv.map(|b| b.data()), &geom);
        let t = Tensor::new(vec![geom.n, geom.cout, geom.hout, geom.wout], out)?;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        Ok(self.push(t, Op::Conv2d { x: ix, w: iw, b: ib, geom }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let xv = &self.nodes[ix].value;
        let width = *xv.shape().last().ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        let (gv, bv) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if gv.shape() != [width] || bv.shape() != [width] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let (y, xhat, rstd) = ops::layer_norm_kernel(xv.data(), gv.data(), bv.data(), width, T::of(eps));
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(t, Op::LayerNorm { x: ix, g: ig, b: ib, xhat, rstd }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = ops::softmax_lastdim(&self.nodes[ix].value)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Softmax { x: ix }, rg))
    }

    /// Attention weights `softmax(x * scale + bias [+ mask])` over the last
    /// axis of logits `B x h x T x T`. `bias` is `1 x h x T x T`; the constant
    /// `mask` is `nW x T x T` and applies `mask[b % nW]` to batch entry `b`.
    pub fn attn_softmax(&mut self, x: Var, scale: T, bias: Var, mask: Option<Var>) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let im = mask.map(|m| self.idx(m)).transpose()?;
        let xs = self.nodes[ix].value.shape().to_vec();
        let [b, h, t, t2] = xs[..] else {
            return Err(Error::invalid("attn_softmax", format!("expected B x h x T x T logits, got {xs:?}")));
        };
        if t != t2 || self.nodes[ib].value.shape() != [1, h, t, t] {
            return Err(Error::shape("attn_softmax", &xs, self.nodes[ib].value.shape()));
        }
        let nw = match im {
            Some(i) => {
                let ms = self.nodes[i].value.shape();
                if ms.len() != 3 || ms[1] != t || ms[2] != t || ms[0] == 0 || b % ms[0] != 0 {
                    return Err(Error::shape("attn_softmax", &xs, ms));
                }
                if self.rg(i) {
                    return Err(Error::invalid("attn_softmax", "mask must be constant"));
                }
                ms[0]
            }
            None => 1,
        };
        let xd = self.nodes[ix].value.data();
        let bd = self.nodes[ib].value.data();
        let md = im.map(|i| self.nodes[i].value.data());
        let plane = t * t;
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let mask_plane = md.map(|m| &m[(bi % nw) * plane..(bi % nw + 1) * plane]);
            for hi in 0..h {
                let off = (bi * h + hi) * plane;
                let bias_plane = &bd[hi * plane..(hi + 1) * plane];
                for r in 0..t {
                    let row = &mut out[off + r * t..off + (r + 1) * t];
                    let src = &xd[off + r * t..off + (r + 1) * t];
                    let brow = &bias_plane[r * t..(r + 1) * t];
                    for ((o, &v), &bv) in row.iter_mut().zip(src).zip(brow) {
                        *o = v * scale + bv;
                    }
                    if let Some(mp) = mask_plane {
                        row.iter_mut().zip(&mp[r * t..(r + 1) * t]).for_each(|(o, &m)| *o += m);
                    }
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    row.iter_mut().for_each(|v| *v = (*v - max).exp_fast());
                    let sum: T = row.iter().copied().sum();
                    let inv = T::one() / sum;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        let tensor = Tensor::new(xs, out)?;
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(tensor, Op::AttnSoftmax { x: ix, bias: ib, scale }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = ops::gelu(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Gelu { x: ix }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.map(ops::sigmoid_scalar);
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Sigmoid { x: ix }, rg))
    }

    /// `out[i] = x[index[i]]`; covers permutations, slicing and tiling.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if index.iter().any(|&i| i as usize >= xv.numel()) {
            return Err(Error::invalid("gather", "index out of range"));
        }
        let t = xv.gather(&index, shape)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Gather { x: ix, index }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let key: Vec<usize> = shape.iter().chain(perm).copied().collect();
        let index = ops::cached_index("permute", &key, || ops::permute_index(&shape, perm).0);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather(x, index, &out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.as_ref().clone().reshape(shape)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Reshape { x: ix }, rg))
    }

    /// Channel slice `x[..., start..end]`.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::invalid("slice_last", "rank-0 input"))?;
        if start >= end || end > width {
            return Err(Error::invalid("slice_last", format!("range {start}..{end} outside width {width}")));
        }
        let rows = shape.iter().product::<usize>() / width;
        let w = end - start;
        let index = ops::cached_index("slice_last", &[rows, width, start, end], || {
            (0..rows)
                .flat_map(|r| (start..end).map(move |c| (r * width + c) as u32))
                .collect()
        });
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = w;
        self.gather(x, index, &out_shape)
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_last", "no inputs"));
        }
        let idxs = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut parts = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", &first, s));
            }
            parts.push((i, *s.last().unwrap()));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(i, w) in &parts {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let t = Tensor::new(shape, out)?;
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(t, Op::ConcatLast { parts }, rg))
    }

    /// Mean over axes `[from, to)`, keeping them as size-1 axes.
    pub fn mean_axes(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        if from >= to || to > shape.len() {
            return Err(Error::invalid("mean_axes", format!("axes {from}..{to} for rank {}", shape.len())));
        }
        let outer: usize = shape[..from].iter().product();
        let mid: usize = shape[from..to].iter().product();
        let inner: usize = shape[to..].iter().product();
        let xd = self.nodes[ix].value.data();
        let inv = T::one() / T::of(mid as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &xd[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape[from..to].iter_mut().for_each(|d| *d = 1);
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Mean { x: ix, outer, mid, inner }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = Tensor::scalar(self.nodes[ix].value.sum());
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Sum { x: ix }, rg))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(pred)?, self.idx(target)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("l1_loss", av.shape(), bv.shape()));
        }
        let total: T = av.data().iter().zip(bv.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let t = Tensor::scalar(total / T::of(av.numel().max(1) as f64));
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::L1 { a: ia, b: ib }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (index, shape) = ops::pixel_shuffle_index(self.shape(x), r)?;
        let mut key = self.shape(x).to_vec();
        key.push(r);
        let index = ops::cached_index("pixel_shuffle", &key, || index);
        self.gather(x, index, &shape)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.nodes[il].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Runs [`Tape::backward`] and accumulates every bound parameter's gradient
    /// into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        for (name, v) in &self.params {
            if let Some(g) = &grads.grads[v.idx] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Parameter names bound on this tape.
    pub fn bound_params(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| n.param.as_deref())
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let need = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, b_strides } => {
                if need(*a) {
                    accumulate(grads, *a, dy);
                }
                if need(*b) {
                    let mut db = vec![T::zero(); self.nodes[*b].value.numel()];
                    ops::for_each_broadcast_row(node.value.shape(), b_strides, |ao, bo, bs, len| {
                        let src = &dy[ao..ao + len];
                        if bs == 0 {
                            db[bo] += src.iter().copied().sum::<T>();
                        } else {
                            db[bo..bo + len].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    });
                    accumulate_owned(grads, *b, db);
                }
            }
            Op::Mul { a, b, b_strides } => {
                let (ad, bd) = (val(*a), val(*b));
                let mut da = if need(*a) { Some(vec![T::zero(); ad.len()]) } else { None };
                let mut db = if need(*b) { Some(vec![T::zero(); bd.len()]) } else { None };
                ops::for_each_broadcast_row(node.value.shape(), b_strides, |ao, bo, bs, len| {
                    for t in 0..len {
                        let bi = bo + t * bs;
                        let g = dy[ao + t];
                        if let Some(da) = da.as_mut() {
                            da[ao + t] = g * bd[bi];
                        }
                        if let Some(db) = db.as_mut() {
                            db[bi] += g * ad[ao + t];
                        }
                    }
                });
                if let Some(da) = da {
                    accumulate_owned(grads, *a, da);
                }
                if let Some(db) = db {
                    accumulate_owned(grads, *b, db);
                }
            }
            Op::Scale { x, k } => {
                accumulate_owned(grads, *x, dy.iter().map(|&g| g * *k).collect());
            }
            Op::MatMul { a, b, trans_b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a), val(*b));
                if need(*a) {
                    let mut da = vec![T::zero(); ad.len()];
                    for bi in 0..*batch {
                        let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        // dA = dC . op(B)^T
                        gemm(dyb, false, bb, !*trans_b, &mut da[bi * m * k..(bi + 1) * m * k], m, n, k, false);
                    }
                    accumulate_owned(grads, *a, da);
                }
                if need(*b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for bi in 0..*batch {
                        let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm(dyb, true, ab, false, dst, n, m, k, false);
                        } else {
                            gemm(ab, true, dyb, false, dst, k, m, n, false);
                        }
                    }
                    accumulate_owned(grads, *b, db);
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if need(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(dy, false, val(*w), true, &mut dx, rows, dout, din, false);
                    accumulate_owned(grads, *x, dx);
                }
                if need(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(val(*x), true, dy, false, &mut dw, din, rows, dout, false);
                    accumulate_owned(grads, *w, dw);
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in dy.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    accumulate_owned(grads, b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = ops::conv2d_adjoint(val(*x), val(*w), dy, geom);
                if need(*x) {
                    accumulate_owned(grads, *x, dx);
                }
                if need(*w) {
                    accumulate_owned(grads, *w, dw);
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    accumulate_owned(grads, b, db);
                }
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let width = val(*g).len();
                let (dx, dg, db) = ops::layer_norm_adjoint(dy, xhat, rstd, val(*g), width);
                if need(*x) {
                    accumulate_owned(grads, *x, dx);
                }
                if need(*g) {
                    accumulate_owned(grads, *g, dg);
                }
                if need(*b) {
                    accumulate_owned(grads, *b, db);
                }
            }
            Op::Softmax { x } => {
                let width = *node.value.shape().last().unwrap();
                accumulate_owned(grads, *x, ops::softmax_adjoint(node.value.data(), dy, width));
            }
            Op::AttnSoftmax { x, bias, scale } => {
                let width = *node.value.shape().last().unwrap();
                let g = ops::softmax_adjoint(node.value.data(), dy, width);
                if need(*bias) {
                    let plane = self.nodes[*bias].value.numel();
                    let mut db = vec![T::zero(); plane];
                    for chunk in g.chunks(plane) {
                        db.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                    accumulate_owned(grads, *bias, db);
                }
                if need(*x) {
                    accumulate_owned(grads, *x, g.into_iter().map(|v| v * *scale).collect());
                }
            }
            Op::Gelu { x } => {
                let dx = val(*x).iter().zip(dy).map(|(&v, &g)| g * ops::gelu_grad_scalar(v)).collect();
                accumulate_owned(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                accumulate_owned(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); self.nodes[*x].value.numel()];
                for (&src, &g) in index.iter().zip(dy) {
                    dx[src as usize] += g;
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::Reshape { x } => accumulate(grads, *x, dy),
            Op::ConcatLast { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = dy.len() / total;
                let mut offset = 0;
                for &(j, w) in parts {
                    if need(j) {
                        let mut dj = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dj.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        accumulate_owned(grads, j, dj);
                    }
                    offset += w;
                }
            }
            Op::Mean { x, outer, mid, inner } => {
                let inv = T::one() / T::of(*mid as f64);
                let mut dx = vec![T::zero(); outer * mid * inner];
                for o in 0..*outer {
                    let src = &dy[o * inner..(o + 1) * inner];
                    for m in 0..*mid {
                        let dst = &mut dx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * inv);
                    }
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::Sum { x } => {
                accumulate_owned(grads, *x, vec![dy[0]; self.nodes[*x].value.numel()]);
            }
            Op::L1 { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let scale = dy[0] / T::of(ad.len().max(1) as f64);
                let da: Vec<T> = ad
                    .iter()
                    .zip(bd)
                    .map(|(&p, &q)| {
                        let d = p - q;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if need(*b) {
                    accumulate_owned(grads, *b, da.iter().map(|&v| -v).collect());
                }
                if need(*a) {
                    accumulate_owned(grads, *a, da);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, g: &[T]) {
    match &mut grads[j] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, g: Vec<T>) {
    match &mut grads[j] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Maximum relative error between the tape gradient of scalar `f` at `x` and
/// central finite differences with step `h`, over all coordinates of `x`.
///
/// The relative error of each coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(point);
        let y = f(&mut tape, xv)?;
        let out = tape.value(y);
        if out.numel() != 1 {
            return Err(Error::invalid(
                "grad_check",
                format!("function must be scalar-valued, got shape {:?}", out.shape()),
            ));
        }
        Ok(out.data()[0])
    };
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must be scalar-valued, got shape {:?}", tape.value(y).shape()),
        ));
    }
    let analytic = tape
        .backward(y)?
        .get(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    for &c in coords {
        let mut plus = x.clone();
        plus.data_mut()[c] += h;
        let mut minus = x.clone();
        minus.data_mut()[c] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[c];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0xd1ff)
    }

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad.as_ref().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_sum_of_squares_gives_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[1.0, -2.0]);
    }

    #[test]
    fn shared_value_accumulates() {
        // y = x + x + x -> dy/dx = 3
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::ones(&[2]));
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn foreign_and_non_scalar_losses_rejected() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let x = t1.input(Tensor::ones(&[2]));
        let y = t2.input(Tensor::ones(&[1]));
        assert!(matches!(t1.backward(y), Err(Error::ForeignVar)));
        assert!(t1.backward(x).is_err());
    }

    #[test]
    fn grad_check_linear_and_quadratic() {
        let x = Tensor::<f64>::uniform(&[5], -1.0, 1.0, &mut rng());
        let e = grad_check(|t, v| t.sum(v), &x, 1e-5).unwrap();
        assert!(e < 1e-9, "{e}");
        let e = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-8, "{e}");
        assert!(grad_check(|_, v| Ok(v), &x, 1e-5).is_err());
    }

    #[test]
    fn grad_check_softmax_sum_squares() {
        let x = Tensor::<f64>::uniform(&[8], -2.0, 2.0, &mut rng());
        let e = grad_check(
            |t, v| {
                let s = t.softmax(v)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    /// Weighted sum that makes every output element matter with a distinct weight.
    fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::uniform(t.shape(y), -1.0, 1.0, &mut r);
        let wv = t.constant(w);
        let p = t.mul(y, wv)?;
        t.sum(p)
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let mut r = rng();
        let x4 = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut r);
        let b = Tensor::<f64>::uniform(&[4], -0.5, 0.5, &mut r);
        let x2 = Tensor::<f64>::uniform(&[3, 2, 5], -1.0, 1.0, &mut r);
        let wl = Tensor::<f64>::uniform(&[5, 4], -1.0, 1.0, &mut r);
        let g = Tensor::<f64>::uniform(&[5], 0.5, 1.5, &mut r);
        let small = Tensor::<f64>::uniform(&[2, 3, 4], -2.0, 2.0, &mut r);
        let gate = Tensor::<f64>::uniform(&[2, 3, 1, 1], -1.0, 1.0, &mut r);
        let logits = Tensor::<f64>::uniform(&[4, 2, 3, 3], -2.0, 2.0, &mut r);
        let tol = 1e-4;

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>, Tensor<f64>)> = vec![
            ("conv_x", Box::new(|t, v| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.conv2d(v, w, Some(b), 1, 1)?;
                probe(t, y, 1)
            }), x4.clone()),
            ("conv_w_strided", Box::new(|t, v| {
                let x = t.constant(x4.clone());
                let y = t.conv2d(x, v, None, 2, 1)?;
                probe(t, y, 2)
            }), w.clone()),
            ("linear_x", Box::new(|t, v| {
                let w = t.constant(wl.clone());
                let y = t.linear(v, w, None)?;
                probe(t, y, 3)
            }), x2.clone()),
            ("linear_w", Box::new(|t, v| {
                let x = t.constant(x2.clone());
                let y = t.linear(x, v, None)?;
                probe(t, y, 4)
            }), wl.clone()),
            ("layer_norm_x", Box::new(|t, v| {
                let (gg, bb) = (t.constant(g.clone()), t.constant(b.clone().reshape(&[4]).unwrap()));
                let _ = bb;
                let beta = t.constant(Tensor::zeros(&[5]));
                let y = t.layer_norm(v, gg, beta, 1e-5)?;
                probe(t, y, 5)
            }), x2.clone()),
            ("layer_norm_gamma", Box::new(|t, v| {
                let x = t.constant(x2.clone());
                let beta = t.constant(Tensor::zeros(&[5]));
                let y = t.layer_norm(x, v, beta, 1e-5)?;
                probe(t, y, 6)
            }), g.clone()),
            ("softmax", Box::new(|t, v| { let y = t.softmax(v)?; probe(t, y, 7) }), small.clone()),
            ("gelu", Box::new(|t, v| { let y = t.gelu(v)?; probe(t, y, 8) }), small.clone()),
            ("attn_softmax_x", Box::new(|t, v| {
                let bias = t.constant(Tensor::<f64>::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(20)));
                let mask = t.constant(Tensor::<f64>::from_fn(&[2, 3, 3], |i| if i % 4 == 1 { -100.0 } else { 0.0 }));
                let y = t.attn_softmax(v, 0.7, bias, Some(mask))?;
                probe(t, y, 18)
            }), logits.clone()),
            ("attn_softmax_bias", Box::new(|t, v| {
                let x = t.constant(logits.clone());
                let y = t.attn_softmax(x, 0.7, v, None)?;
                probe(t, y, 19)
            }), Tensor::<f64>::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(21))),
            ("sigmoid", Box::new(|t, v| { let y = t.sigmoid(v)?; probe(t, y, 9) }), small.clone()),
            ("matmul_a", Box::new(|t, v| {
                let b = t.constant(small.clone());
                let y = t.matmul(v, b, true)?;
                probe(t, y, 10)
            }), small.clone()),
            ("matmul_b", Box::new(|t, v| {
                let a = t.constant(small.clone().reshape(&[2, 4, 3]).unwrap());
                let y = t.matmul(a, v, false)?;
                probe(t, y, 11)
            }), small.clone()),
            ("matmul_b_trans", Box::new(|t, v| {
                let a = t.constant(small.clone());
                let y = t.matmul(a, v, true)?;
                probe(t, y, 12)
            }), small.clone()),
            ("mul_broadcast", Box::new(|t, v| {
                let x = t.constant(x4.clone());
                let y = t.mul(x, v)?;
                probe(t, y, 13)
            }), gate.clone()),
            ("add_broadcast", Box::new(|t, v| {
                let x = t.constant(x4.clone());
                let y = t.add(x, v)?;
                let y = t.mul(y, y)?;
                probe(t, y, 14)
            }), gate.clone()),
            ("permute_pixel_shuffle", Box::new(|t, v| {
                let p = t.permute(v, &[0, 2, 3, 1])?;
                let p = t.reshape(p, &[2, 4, 4, 3])?;
                let p = t.permute(p, &[0, 3, 1, 2])?;
                let w = t.constant(Tensor::<f64>::ones(&[4, 3, 1, 1]));
                let c = t.conv2d(p, w, None, 1, 0)?;
                let y = t.pixel_shuffle(c, 2)?;
                probe(t, y, 15)
            }), x4.clone()),
            ("mean_concat_slice", Box::new(|t, v| {
                let m = t.mean_axes(v, 1, 2)?;
                let s = t.slice_last(v, 1, 4)?;
                let c = t.concat_last(&[v, s])?;
                let y = t.mul(c, c)?;
                let a = probe(t, y, 16)?;
                let b = probe(t, m, 17)?;
                t.add(a, b)
            }), small.clone()),
        ];
        for (name, f, x) in cases {
            let e = grad_check(f, &x, 1e-5).unwrap();
            assert!(e < tol, "{name}: {e}");
        }
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let pred = Tensor::<f64>::from_f64(&[4], &[0.5, -0.2, 1.0, 0.0]).unwrap();
        let target = Tensor::<f64>::from_f64(&[4], &[0.0, 0.3, 1.5, -1.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.input(pred.clone());
        let tv = tape.constant(target.clone());
        let loss = tape.l1_loss(p, tv).unwrap();
        assert!((tape.value(loss).data()[0] - (0.5 + 0.5 + 0.5 + 1.0) / 4.0).abs() < 1e-15);
        let g = tape.backward(loss).unwrap().get(p).unwrap();
        assert_eq!(g.data(), &[0.25, -0.25, -0.25, 0.25]);
        let e = grad_check(
            |t, v| {
                let tv = t.constant(target.clone());
                t.l1_loss(v, tv)
            },
            &pred,
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }
}
