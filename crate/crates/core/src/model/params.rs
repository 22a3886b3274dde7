//! Parameter layout and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::HmaConfig;
use crate::attention::table_rows;
use crate::error::Result;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const TRUNC_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal, `std = 0.02`, cut at two standard deviations.
    TruncNormal,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn init_tensor<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self.init {
            Init::TruncNormal => Tensor::trunc_normal(&self.shape, TRUNC_STD, rng),
            Init::FanInUniform(fan_in) => {
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(&self.shape, -b, b, rng)
            }
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
        }
    }
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = cin * k * k;
        self.push(format!("{prefix}.weight"), vec![cout, cin, k, k], Init::FanInUniform(fan_in));
        self.push(format!("{prefix}.bias"), vec![cout], Init::FanInUniform(fan_in));
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.push(format!("{prefix}.weight"), vec![din, dout], Init::TruncNormal);
        self.push(format!("{prefix}.bias"), vec![dout], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.weight"), vec![c], Init::Ones);
        self.push(format!("{prefix}.bias"), vec![c], Init::Zeros);
    }

    fn attn(&mut self, prefix: &str, c: usize, heads: usize, extent: usize) {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{p}"), c, c);
        }
        self.linear(&format!("{prefix}.proj"), c, c);
        self.push(format!("{prefix}.bias_table"), vec![table_rows((extent, extent)), heads], Init::TruncNormal);
    }

    fn mlp(&mut self, prefix: &str, c: usize, ratio: usize) {
        self.linear(&format!("{prefix}.fc1"), c, c * ratio);
        self.linear(&format!("{prefix}.fc2"), c * ratio, c);
    }
}

/// Every parameter of the network in construction order.
pub fn param_specs(cfg: &HmaConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut s = Specs(Vec::new());
    s.conv("conv_first", c, cfg.in_channels, 3);
    for i in 0..cfg.n_rhtb {
        for j in 0..cfg.n_fab {
            let fab = format!("layers.{i}.fab.{j}");
            if cfg.use_fused_conv {
                let e = cfg.expanded();
                s.norm(&format!("{fab}.fused.norm"), c);
                s.conv(&format!("{fab}.fused.conv_expand"), e, c, 3);
                s.linear(&format!("{fab}.fused.se.reduce"), e, cfg.se_width());
                s.linear(&format!("{fab}.fused.se.expand"), cfg.se_width(), e);
                s.conv(&format!("{fab}.fused.conv_project"), c, e, 1);
            }
            for k in 0..cfg.stl_per_fab {
                let stl = format!("{fab}.stl.{k}");
                s.norm(&format!("{stl}.norm1"), c);
                s.attn(&format!("{stl}.attn"), c, cfg.heads_fab, cfg.window);
                s.norm(&format!("{stl}.norm2"), c);
                s.mlp(&format!("{stl}.mlp"), c, cfg.mlp_ratio);
            }
        }
        if cfg.use_gab {
            let gab = format!("layers.{i}.gab");
            s.attn(&format!("{gab}.mal.win1"), c / 4, cfg.heads_gab_win, cfg.window);
            s.attn(&format!("{gab}.mal.win2"), c / 4, cfg.heads_gab_win, cfg.window);
            s.attn(&format!("{gab}.mal.grid"), c / 2, cfg.heads_gab_grid, cfg.grid_extent());
            s.linear(&format!("{gab}.mal.grid.g"), c, c / 2);
            s.linear(&format!("{gab}.mal.proj"), c, c);
            s.norm(&format!("{gab}.mal.norm"), c);
            s.mlp(&format!("{gab}.mlp"), c, cfg.mlp_ratio);
            s.norm(&format!("{gab}.norm"), c);
        }
        s.conv(&format!("layers.{i}.conv"), c, c, 3);
    }
    s.conv("conv_after_body", c, c, 3);
    let f = cfg.recon_feat;
    s.conv("recon.conv_before", f, c, 3);
    for (k, r) in cfg.upsample_stages().into_iter().enumerate() {
        s.conv(&format!("recon.upsample.{k}"), f * r * r, f, 3);
    }
    s.conv("recon.conv_last", cfg.in_channels, f, 3);
    s.0
}

/// Whether a parameter belongs to the scale-dependent reconstruction head.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("recon.")
}

/// Fresh parameters for `cfg`, drawn in construction order from a seeded stream.
pub fn init_params<T: Scalar>(cfg: &HmaConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let t = spec.init_tensor(&mut rng);
        store.insert(spec.name, t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_init_deterministic() {
        let cfg = HmaConfig::toy();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        assert_eq!(a.len(), param_specs(&cfg).len());
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn init_ranges() {
        let cfg = HmaConfig::toy();
        let s = init_params::<f64>(&cfg, 1).unwrap();
        let w = s.value("layers.0.fab.0.stl.0.attn.q.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(s.value("layers.0.gab.norm.weight").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(s.value("layers.0.gab.norm.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let conv = s.value("conv_first.weight").unwrap();
        let bound = 1.0 / 27f64.sqrt();
        assert!(conv.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn expansion_rate_six_on_thirty_channels() {
        let mut cfg = HmaConfig::toy();
        cfg.channels = 32;
        cfg.expansion_rate = 6;
        let specs = param_specs(&cfg);
        let w = specs.iter().find(|s| s.name == "layers.0.fab.0.fused.conv_expand.weight").unwrap();
        assert_eq!(w.shape, vec![192, 32, 3, 3]);
        // C = 30 expands to 180
        let mut c30 = cfg.clone();
        c30.channels = 30;
        assert_eq!(c30.expanded(), 180);
    }
}
