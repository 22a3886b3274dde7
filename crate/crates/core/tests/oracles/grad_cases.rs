//! Scalar test functions covering every differentiable operation, for
//! central-difference gradient checks in f64.

use hma_core::attention::{
    grid_msa_tape, grid_shuffle_tape, grid_unshuffle_tape, msa_tape, shift_mask, window_partition_tape,
    window_reverse_tape, AttentionParams, AttnVars, WindowSpec,
};
use hma_core::model::{HmaConfig, HmaModel};
use hma_core::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Case = (String, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>, Tensor<f64>);

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `sum(y * w)` with fixed random `w`, so every output coordinate matters.
pub fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(uniform(t.shape(y), -1.0, 1.0, seed));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn bind(t: &mut Tape<f64>, p: &AttentionParams<f64>) -> AttnVars {
    let mut c = |x: &Tensor<f64>| t.constant(x.clone());
    AttnVars {
        q: (c(&p.wq), c(&p.bq)),
        k: (c(&p.wk), c(&p.bk)),
        v: (c(&p.wv), c(&p.bv)),
        proj: (c(&p.w_out), c(&p.b_out)),
        table: c(&p.bias.table),
        extent: p.bias.extent,
        heads: p.heads,
    }
}

fn case(name: &str, x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static) -> Case {
    (name.to_string(), Box::new(f), x)
}

/// Primitive and attention-level cases.
pub fn primitive_cases() -> Vec<Case> {
    let x4 = uniform(&[2, 3, 4, 4], -1.0, 1.0, 1);
    let w = uniform(&[4, 3, 3, 3], -0.5, 0.5, 2);
    let b = uniform(&[4], -0.5, 0.5, 3);
    let x2 = uniform(&[3, 2, 5], -1.0, 1.0, 4);
    let wl = uniform(&[5, 4], -1.0, 1.0, 5);
    let gamma = uniform(&[5], 0.5, 1.5, 6);
    let small = uniform(&[2, 3, 4], -2.0, 2.0, 7);
    let logits = uniform(&[4, 2, 3, 3], -2.0, 2.0, 8);
    let bias = uniform(&[1, 2, 3, 3], -1.0, 1.0, 9);
    let tokens = uniform(&[1, 8, 8, 4], -1.0, 1.0, 10);
    let attn = AttentionParams::<f64>::random(4, 2, (2, 2), 0.5, &mut ChaCha8Rng::seed_from_u64(11));
    let wins = uniform(&[3, 4, 4], -1.0, 1.0, 12);
    let grid_g = uniform(&[3, 4, 4], -1.0, 1.0, 13);

    let mut cases = Vec::new();
    {
        let (w, b) = (w.clone(), b.clone());
        cases.push(case("conv2d input", x4.clone(), move |t, v| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(v, wv, Some(bv), 1, 1)?;
            probe(t, y, 100)
        }));
    }
    {
        let x4 = x4.clone();
        cases.push(case("conv2d weight (stride 2)", w.clone(), move |t, v| {
            let x = t.constant(x4.clone());
            let y = t.conv2d(x, v, None, 2, 1)?;
            probe(t, y, 101)
        }));
    }
    {
        let x4 = x4.clone();
        cases.push(case("conv2d bias", b.clone(), move |t, v| {
            let x = t.constant(x4.clone());
            let wv = t.constant(Tensor::from_fn(&[4, 3, 1, 1], |i| 0.1 * i as f64));
            let y = t.conv2d(x, wv, Some(v), 1, 0)?;
            probe(t, y, 102)
        }));
    }
    {
        let wl = wl.clone();
        cases.push(case("linear input", x2.clone(), move |t, v| {
            let wv = t.constant(wl.clone());
            let bv = t.constant(Tensor::from_fn(&[4], |i| i as f64));
            let y = t.linear(v, wv, Some(bv))?;
            probe(t, y, 103)
        }));
    }
    {
        let x2 = x2.clone();
        cases.push(case("linear weight", wl.clone(), move |t, v| {
            let x = t.constant(x2.clone());
            let y = t.linear(x, v, None)?;
            probe(t, y, 104)
        }));
    }
    {
        let gamma = gamma.clone();
        cases.push(case("layer_norm input", x2.clone(), move |t, v| {
            let g = t.constant(gamma.clone());
            let bt = t.constant(Tensor::from_fn(&[5], |i| 0.1 * i as f64));
            let y = t.layer_norm(v, g, bt, 1e-5)?;
            probe(t, y, 105)
        }));
    }
    {
        let x2 = x2.clone();
        cases.push(case("layer_norm affine", gamma.clone(), move |t, v| {
            let x = t.constant(x2.clone());
            let y = t.layer_norm(x, v, v, 1e-5)?;
            probe(t, y, 106)
        }));
    }
    cases.push(case("softmax", small.clone(), |t, v| {
        let y = t.softmax(v)?;
        probe(t, y, 107)
    }));
    cases.push(case("gelu", small.clone(), |t, v| {
        let y = t.gelu(v)?;
        probe(t, y, 108)
    }));
    cases.push(case("sigmoid", small.clone(), |t, v| {
        let y = t.sigmoid(v)?;
        probe(t, y, 109)
    }));
    {
        let bias = bias.clone();
        cases.push(case("attention softmax logits", logits.clone(), move |t, v| {
            let bv = t.constant(bias.clone());
            let m = t.constant(Tensor::from_fn(&[2, 3, 3], |i| if i % 4 == 1 { -100.0 } else { 0.0 }));
            let y = t.attn_softmax(v, 0.7, bv, Some(m))?;
            probe(t, y, 110)
        }));
    }
    {
        let logits = logits.clone();
        cases.push(case("attention softmax bias", bias.clone(), move |t, v| {
            let x = t.constant(logits.clone());
            let y = t.attn_softmax(x, 0.7, v, None)?;
            probe(t, y, 111)
        }));
    }
    {
        let other = small.clone().reshape(&[2, 4, 3]).unwrap();
        cases.push(case("matmul", small.clone(), move |t, v| {
            let o = t.constant(other.clone());
            let y = t.matmul(v, o, false)?;
            let z = t.matmul(y, v, false)?;
            probe(t, z, 112)
        }));
    }
    {
        let x4 = x4.clone();
        cases.push(case("broadcast add and mul", uniform(&[2, 3, 1, 1], -1.0, 1.0, 14), move |t, v| {
            let x = t.constant(x4.clone());
            let a = t.add(x, v)?;
            let m = t.mul(a, v)?;
            let s = t.scale(m, 0.3)?;
            probe(t, s, 113)
        }));
    }
    cases.push(case("permute, reshape, pixel_shuffle", x4.clone(), |t, v| {
        let p = t.permute(v, &[0, 2, 3, 1])?;
        let p = t.reshape(p, &[2, 4, 4, 3])?;
        let p = t.permute(p, &[0, 3, 1, 2])?;
        let w = t.constant(Tensor::from_fn(&[12, 3, 1, 1], |i| ((i % 5) as f64 - 2.0) * 0.3));
        let c = t.conv2d(p, w, None, 1, 0)?;
        let y = t.pixel_shuffle(c, 2)?;
        probe(t, y, 114)
    }));
    cases.push(case("mean, slice, concat", small.clone(), |t, v| {
        let m = t.mean_axes(v, 1, 2)?;
        let s = t.slice_last(v, 1, 4)?;
        let c = t.concat_last(&[v, s])?;
        let sq = t.mul(c, c)?;
        let a = probe(t, sq, 115)?;
        let b = probe(t, m, 116)?;
        t.add(a, b)
    }));
    cases.push(case("gather", small.clone(), |t, v| {
        let index = std::sync::Arc::new((0..30u32).map(|i| (i * 7) % 24).collect::<Vec<_>>());
        let y = t.gather(v, index, &[5, 6])?;
        let sq = t.mul(y, y)?;
        probe(t, sq, 117)
    }));
    cases.push(case("l1 loss", small.clone(), |t, v| {
        // targets far from the inputs keep the kink out of the difference stencil
        let target = t.constant(Tensor::from_fn(&[2, 3, 4], |i| if i % 2 == 0 { 5.0 } else { -5.0 }));
        let y = t.gelu(v)?;
        t.l1_loss(y, target)
    }));
    for shift in [0, 2] {
        cases.push(case(&format!("window partition/reverse (shift {shift})"), tokens.clone(), move |t, v| {
            let spec = WindowSpec::new(4, shift)?;
            let w = window_partition_tape(t, v, spec)?;
            let sq = t.mul(w, w)?;
            let back = window_reverse_tape(t, sq, spec, 8, 8)?;
            probe(t, back, 118)
        }));
    }
    cases.push(case("grid shuffle/unshuffle", tokens.clone(), |t, v| {
        let g = grid_shuffle_tape(t, v, 2)?;
        let a = probe(t, g, 119)?;
        let sq = t.mul(g, g)?;
        let back = grid_unshuffle_tape(t, sq, 2, 8, 8)?;
        let b = probe(t, back, 120)?;
        t.add(a, b)
    }));
    {
        let attn = attn.clone();
        cases.push(case("window attention (masked)", wins.clone(), move |t, v| {
            let p = bind(t, &attn);
            let mask = shift_mask::<f64>(WindowSpec::new(2, 1)?, 2, 6)?.expect("shifted");
            let m = t.constant(mask);
            let y = msa_tape(t, v, &p, (2, 2), Some(m))?;
            probe(t, y, 121)
        }));
    }
    {
        let (attn, grid_g) = (attn.clone(), grid_g.clone());
        cases.push(case("grid attention features", wins.clone(), move |t, v| {
            let p = bind(t, &attn);
            let g = t.constant(grid_g.clone());
            let y = grid_msa_tape(t, v, g, &p, (2, 2), false)?;
            probe(t, y, 122)
        }));
    }
    {
        let (attn, wins) = (attn.clone(), wins.clone());
        cases.push(case("grid attention interaction", grid_g.clone(), move |t, v| {
            let p = bind(t, &attn);
            let f = t.constant(wins.clone());
            let y = grid_msa_tape(t, f, v, &p, (2, 2), true)?;
            probe(t, y, 123)
        }));
    }
    {
        let wins = wins.clone();
        cases.push(case("attention bias table", attn.bias.table.clone(), move |t, v| {
            let mut p = bind(t, &attn);
            p.table = v;
            let x = t.constant(wins.clone());
            let y = msa_tape(t, x, &p, (2, 2), None)?;
            probe(t, y, 124)
        }));
    }
    cases
}

/// The toy network with seeded parameters and a `1 x 3 x 16 x 16` input.
pub fn toy_model_f64(seed: u64) -> (HmaModel<f64>, Tensor<f64>) {
    let model = HmaModel::<f64>::new(HmaConfig::toy(), seed).unwrap();
    let x = uniform(&[1, 3, 16, 16], 0.0, 1.0, seed + 1000);
    (model, x)
}

/// `probe(model(x))`.
pub fn model_objective(model: &HmaModel<f64>, t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let y = model.forward_tape(t, x, None)?;
    probe(t, y, 200)
}

/// Worst relative error of parameter gradients of [`model_objective`] over
/// `per_tensor` coordinates of every parameter tensor, spread evenly.
pub fn model_param_grad_error(model: &HmaModel<f64>, x: &Tensor<f64>, per_tensor: usize, h: f64) -> Result<(f64, String)> {
    let eval = |m: &HmaModel<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let l = model_objective(m, &mut t, xv)?;
        Ok(t.value(l).data()[0])
    };
    let mut store = model.params.clone();
    {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let l = model_objective(model, &mut t, xv)?;
        store.zero_grads();
        t.backward_into(l, &mut store)?;
    }
    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        let p = store.get(&name).expect("param");
        let n = p.value.numel();
        let grad = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let picks = per_tensor.min(n);
        for s in 0..picks {
            let c = (s * n) / picks + (s * 7919) % (n / picks).max(1);
            let bump = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let mut v = m.params.value(&name)?.clone();
                v.data_mut()[c] += delta;
                m.params.set(&name, v)?;
                eval(&m)
            };
            let numeric = (bump(h)? - bump(-h)?) / (2.0 * h);
            let a = grad.data()[c];
            let e = (a - numeric).abs() / a.abs().max(1.0);
            if e > worst.0 {
                worst = (e, format!("{name}[{c}]"));
            }
        }
    }
    Ok(worst)
}
