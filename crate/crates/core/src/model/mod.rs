//! The HMA network: configuration, parameter layout, block forwards,
//! complexity accounting and tiled inference.

pub mod blocks;
pub mod complexity;
pub mod config;
pub mod network;
pub mod params;
pub mod tiled;

pub use blocks::{Ctx, Taps};
pub use complexity::{count_params_macs, Complexity, ComplexityItem};
pub use config::HmaConfig;
pub use network::HmaModel;
pub use params::{init_params, is_head_param, param_specs, Init, ParamSpec};
pub use tiled::tiled_inference;
