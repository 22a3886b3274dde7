//! Parameter and multiply-add accounting.
//!
//! Multiply-adds count convolutions (`O·I·kH·kW·Hout·Wout`), linear layers
//! (`tokens·Din·Dout`) and the two matrix products of every attention map
//! (`QK^T` and `AV`). Normalization, activations, softmax and bias additions
//! are not counted.

use std::fmt;

use super::config::HmaConfig;
use super::params::param_specs;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ComplexityItem {
    pub name: &'static str,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub params: u64,
    pub macs: u64,
    /// Per-submodule totals, summed over all blocks.
    pub items: Vec<ComplexityItem>,
}

const ITEMS: [&str; 8] = [
    "shallow conv",
    "fab.fused_conv",
    "fab.stl",
    "gab.mal",
    "gab.mlp",
    "rhtb.conv",
    "body conv",
    "reconstruction",
];

fn category(name: &str) -> &'static str {
    if name.starts_with("conv_first") {
        ITEMS[0]
    } else if name.contains(".fused.") {
        ITEMS[1]
    } else if name.contains(".stl.") {
        ITEMS[2]
    } else if name.contains(".gab.mal.") {
        ITEMS[3]
    } else if name.contains(".gab.") {
        ITEMS[4]
    } else if name.starts_with("layers.") {
        ITEMS[5]
    } else if name.starts_with("conv_after_body") {
        ITEMS[6]
    } else {
        ITEMS[7]
    }
}

/// Parameter count (exact, by enumerating the layout) and multiply-adds for
/// one `h x w` low-resolution input.
pub fn count_params_macs(cfg: &HmaConfig, input_hw: (usize, usize)) -> Complexity {
    let mut items: Vec<ComplexityItem> = ITEMS
        .iter()
        .map(|&name| ComplexityItem { name, ..Default::default() })
        .collect();
    let slot = |name: &str| ITEMS.iter().position(|&n| n == name).unwrap();
    for spec in param_specs(cfg) {
        items[slot(category(&spec.name))].params += spec.numel() as u64;
    }

    let (h, w) = (input_hw.0 as u64, input_hw.1 as u64);
    let hw = h * w;
    let c = cfg.channels as u64;
    let cin = cfg.in_channels as u64;
    let m2 = (cfg.window * cfg.window) as u64;
    let r = cfg.mlp_ratio as u64;
    let blocks = cfg.n_rhtb as u64;
    let fabs = blocks * cfg.n_fab as u64;
    let conv = |o: u64, i: u64, k: u64, pixels: u64| o * i * k * k * pixels;
    // q, k, v and output projections plus QK^T and AV over `t` keys
    let attention = |width: u64, t: u64| 4 * width * width * hw + 2 * hw * t * width;
    let mlp = |width: u64| 2 * r * width * width * hw;

    items[0].macs = conv(c, cin, 3, hw);
    if cfg.use_fused_conv {
        let e = cfg.expanded() as u64;
        let se = cfg.se_width() as u64;
        items[1].macs = fabs * (conv(e, c, 3, hw) + conv(c, e, 1, hw) + 2 * e * se);
    }
    items[2].macs = fabs * cfg.stl_per_fab as u64 * (attention(c, m2) + mlp(c));
    if cfg.use_gab {
        let k = cfg.grid_interval as u64;
        let tg = (h / k) * (w / k);
        let windows = 2 * attention(c / 4, m2);
        let grid = 4 * (c / 2) * (c / 2) * hw + c * (c / 2) * hw + 4 * hw * tg * (c / 2);
        items[3].macs = blocks * (windows + grid + c * c * hw);
        items[4].macs = blocks * mlp(c);
    }
    items[5].macs = blocks * conv(c, c, 3, hw);
    items[6].macs = conv(c, c, 3, hw);
    let f = cfg.recon_feat as u64;
    let mut recon = conv(f, c, 3, hw);
    let mut pixels = hw;
    for r in cfg.upsample_stages() {
        let r = r as u64;
        recon += conv(f * r * r, f, 3, pixels);
        pixels *= r * r;
    }
    recon += conv(cin, f, 3, pixels);
    items[7].macs = recon;

    Complexity {
        params: items.iter().map(|i| i.params).sum(),
        macs: items.iter().map(|i| i.macs).sum(),
        items,
    }
}

impl fmt::Display for Complexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>14} {:>18}", "submodule", "params", "multiply-adds")?;
        for it in &self.items {
            writeln!(f, "{:<16} {:>14} {:>18}", it.name, it.params, it.macs)?;
        }
        write!(f, "{:<16} {:>14} {:>18}", "total", self.params, self.macs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HmaModel;

    #[test]
    fn single_conv_closed_form() {
        let cfg = HmaConfig::full();
        let c = count_params_macs(&cfg, (64, 64));
        assert_eq!(c.items[0].params, 180 * 3 * 9 + 180);
        assert_eq!(c.items[0].params, 5040);
    }

    #[test]
    fn params_match_store() {
        let cfg = HmaConfig::toy();
        let m = HmaModel::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(count_params_macs(&cfg, (64, 64)).params, m.num_params() as u64);
    }

    #[test]
    fn swin_baseline_macs() {
        // Plain window-transformer baseline: no fused conv, no GAB, six
        // layers per group.
        let mut cfg = HmaConfig::full();
        cfg.use_fused_conv = false;
        cfg.use_gab = false;
        cfg.n_fab = 3;
        let c = count_params_macs(&cfg, (64, 64));
        let g = c.macs as f64 / 1e9;
        assert!((g - 63.7).abs() < 0.2, "{g}");
    }
}
