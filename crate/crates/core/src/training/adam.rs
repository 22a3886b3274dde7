//! Bias-corrected Adam without weight decay.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.99;
pub const EPS: f64 = 1e-8;

/// First and second moments, named like the parameters they track, and the
/// number of steps taken.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for p in params.iter() {
                s.insert(p.name.clone(), Tensor::zeros(p.value.shape()))
                    .expect("parameter names are unique");
            }
            s
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// Checks that the moments mirror `params` name for name and shape for shape.
    pub fn check_matches(&self, params: &ParamStore<T>) -> Result<()> {
        for moments in [&self.m, &self.v] {
            if moments.len() != params.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tracks {} tensors, model has {}",
                    moments.len(),
                    params.len()
                )));
            }
            for p in params.iter() {
                let s = moments.value(&p.name)?;
                if s.shape() != p.value.shape() {
                    return Err(Error::shape("AdamState", s.shape(), p.value.shape()));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            m: self.m.cast(),
            v: self.v.cast(),
            t: self.t,
        }
    }
}

/// One update of every parameter from its accumulated gradient. Gradients
/// are left in place; callers clear them before the next accumulation.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    state.check_matches(params)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::of(1.0 - BETA1.powi(t));
    let bc2 = T::of(1.0 - BETA2.powi(t));
    let (eps, step) = (T::of(EPS), T::of(lr));
    for p in params.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        let m = state.m.get_mut(&p.name).expect("checked above");
        let m = Arc::make_mut(&mut m.value);
        let v = state.v.get_mut(&p.name).expect("checked above");
        let v = Arc::make_mut(&mut v.value);
        let value = Arc::make_mut(&mut p.value);
        for (((w, &gi), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
            if lr != 0.0 {
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= step * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
