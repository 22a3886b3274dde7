use super::blocks::{hma_forward, Ctx, Taps};
use super::config::HmaConfig;
use super::params::{init_params, param_specs};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct HmaModel<T> {
    pub config: HmaConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> HmaModel<T> {
    pub fn new(config: HmaConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against the layout.
    pub fn from_parts(config: HmaConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "configuration needs {} parameter tensors, store holds {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let v = params.value(&spec.name)?;
            if v.shape() != spec.shape.as_slice() {
                return Err(Error::shape("HmaModel::from_parts", &spec.shape, v.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records the forward pass of `img` (`N x C_in x H x W`) on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, img: Var, taps: Option<&mut Taps>) -> Result<Var> {
        let mut ctx = Ctx::new(tape, &self.params, &self.config);
        if let Some(t) = taps {
            ctx = ctx.with_taps(t);
        }
        hma_forward(&mut ctx, img)
    }

    /// `N x C_in x H x W -> N x C_in x sH x sW`.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let y = self.forward_tape(&mut tape, x, None)?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<U: Scalar>(&self) -> HmaModel<U> {
        HmaModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
