pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod fsutil;
pub mod imaging;
pub mod model;
pub mod ops;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use param::{Param, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use imaging::{ImageF32, ImageU8};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::HmaModel<f32>;
pub type Model64 = model::HmaModel<f64>;
