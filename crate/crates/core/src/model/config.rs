use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Missing JSON fields take the full-scale
/// defaults; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmaConfig {
    /// Upscaling factor `s`.
    pub scale: usize,
    /// Feature width `C`.
    pub channels: usize,
    /// Window side `M`.
    pub window: usize,
    /// Grid interval `K`.
    pub grid_interval: usize,
    /// Residual hybrid transformer blocks.
    pub n_rhtb: usize,
    /// Fused attention blocks per RHTB.
    pub n_fab: usize,
    /// Transformer layers per FAB; shifts alternate `0, M/2, ...`.
    pub stl_per_fab: usize,
    pub heads_fab: usize,
    pub heads_gab_grid: usize,
    pub heads_gab_win: usize,
    pub expansion_rate: usize,
    /// Divisor for the squeeze-excitation bottleneck (`eC / shrink_rate`).
    pub shrink_rate: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
    /// Training input side; fixes the extent of the grid bias table (`img_size / K`).
    pub img_size: usize,
    /// Width of the reconstruction head.
    pub recon_feat: usize,
    pub use_fused_conv: bool,
    pub use_gab: bool,
    /// Scale grid logits by `1/d` instead of `1/sqrt(d)`.
    pub legacy_grid_scale: bool,
}

impl Default for HmaConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl HmaConfig {
    /// Full-size configuration (×4).
    pub fn full() -> Self {
        Self {
            scale: 4,
            channels: 180,
            window: 16,
            grid_interval: 4,
            n_rhtb: 6,
            n_fab: 6,
            stl_per_fab: 2,
            heads_fab: 6,
            heads_gab_grid: 3,
            heads_gab_win: 3,
            expansion_rate: 6,
            shrink_rate: 2,
            mlp_ratio: 2,
            in_channels: 3,
            img_size: 64,
            recon_feat: 64,
            use_fused_conv: true,
            use_gab: true,
            legacy_grid_scale: false,
        }
    }

    /// Desk-scale configuration (×2) used by tests and the toy preset.
    pub fn toy() -> Self {
        Self {
            scale: 2,
            channels: 32,
            window: 8,
            grid_interval: 2,
            n_rhtb: 2,
            n_fab: 2,
            stl_per_fab: 2,
            heads_fab: 2,
            heads_gab_grid: 2,
            heads_gab_win: 2,
            expansion_rate: 2,
            shrink_rate: 2,
            mlp_ratio: 2,
            in_channels: 3,
            img_size: 64,
            recon_feat: 32,
            use_fused_conv: true,
            use_gab: true,
            legacy_grid_scale: false,
        }
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Spatial granularity every input must respect: `lcm(M, K)`.
    pub fn granularity(&self) -> usize {
        lcm(self.window, self.grid_interval)
    }

    pub fn expanded(&self) -> usize {
        self.channels * self.expansion_rate
    }

    pub fn se_width(&self) -> usize {
        self.expanded() / self.shrink_rate
    }

    pub fn grid_extent(&self) -> usize {
        self.img_size / self.grid_interval
    }

    /// Pixel-shuffle factor of each upsampling stage.
    pub fn upsample_stages(&self) -> Vec<usize> {
        match self.scale {
            3 => vec![3],
            s => vec![2; s.trailing_zeros() as usize],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if ![2, 3, 4].contains(&self.scale) {
            return fail(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        let positive = [
            ("channels", self.channels),
            ("window", self.window),
            ("grid_interval", self.grid_interval),
            ("n_rhtb", self.n_rhtb),
            ("n_fab", self.n_fab),
            ("stl_per_fab", self.stl_per_fab),
            ("heads_fab", self.heads_fab),
            ("heads_gab_grid", self.heads_gab_grid),
            ("heads_gab_win", self.heads_gab_win),
            ("expansion_rate", self.expansion_rate),
            ("shrink_rate", self.shrink_rate),
            ("mlp_ratio", self.mlp_ratio),
            ("in_channels", self.in_channels),
            ("img_size", self.img_size),
            ("recon_feat", self.recon_feat),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        let c = self.channels;
        if c % 4 != 0 {
            return fail(format!("channels {c} must be divisible by 4 for the mixed-attention split"));
        }
        if c % self.heads_fab != 0 {
            return fail(format!("channels {c} not divisible by heads_fab {}", self.heads_fab));
        }
        if (c / 2) % self.heads_gab_grid != 0 {
            return fail(format!("C/2 = {} not divisible by heads_gab_grid {}", c / 2, self.heads_gab_grid));
        }
        if (c / 4) % self.heads_gab_win != 0 {
            return fail(format!("C/4 = {} not divisible by heads_gab_win {}", c / 4, self.heads_gab_win));
        }
        if self.window < 2 {
            return fail("window must be at least 2 so the shifted window has a nonzero shift".into());
        }
        if self.window % self.grid_interval != 0 {
            return fail(format!(
                "grid_interval {} must divide window {}",
                self.grid_interval, self.window
            ));
        }
        if self.img_size % self.granularity() != 0 {
            return fail(format!(
                "img_size {} must be divisible by lcm(window, grid_interval) = {}",
                self.img_size,
                self.granularity()
            ));
        }
        if self.expanded() % self.shrink_rate != 0 {
            return fail(format!(
                "expanded width {} not divisible by shrink_rate {}",
                self.expanded(),
                self.shrink_rate
            ));
        }
        Ok(())
    }

    /// Checks an input's spatial dims, naming the padding it would need.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let g = self.granularity();
        if h == 0 || w == 0 || h % g != 0 || w % g != 0 {
            let pad = |v: usize| (g - v % g) % g;
            return Err(Error::invalid(
                "hma_forward",
                format!(
                    "input {h}x{w} must be a multiple of {g} (lcm of window and grid interval); pad by {}x{} or use tiled inference",
                    pad(h),
                    pad(w)
                ),
            ));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}
