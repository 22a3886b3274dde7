//! Seeding a model at one scale with parameters trained at another.

use std::fmt;

use super::checkpoint::Checkpoint;
use crate::error::Result;
use crate::model::{init_params, HmaConfig, HmaModel};

/// Which destination parameters were copied from the source and which kept
/// their fresh initialization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
    pub copied_scalars: usize,
    pub reinitialized_scalars: usize,
}

impl TransferReport {
    pub fn total(&self) -> usize {
        self.copied.len() + self.reinitialized.len()
    }
}

impl fmt::Display for TransferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "copied {} of {} tensors ({} scalars); reinitialized {} ({} scalars)",
            self.copied.len(),
            self.total(),
            self.copied_scalars,
            self.reinitialized.len(),
            self.reinitialized_scalars
        )?;
        for name in &self.reinitialized {
            writeln!(f, "  reinitialized {name}")?;
        }
        Ok(())
    }
}

/// Builds a `dst_cfg` model: every parameter whose name and shape match the
/// source is copied, the rest keep the initialization drawn from `seed`.
pub fn transfer_parameters(src: &Checkpoint, dst_cfg: &HmaConfig, seed: u64) -> Result<(HmaModel<f32>, TransferReport)> {
    let mut params = init_params::<f32>(dst_cfg, seed)?;
    let mut report = TransferReport::default();
    for p in params.iter_mut() {
        match src.params.get(&p.name) {
            Some(s) if s.value.shape() == p.value.shape() => {
                p.value = s.value.clone();
                report.copied_scalars += p.value.numel();
                report.copied.push(p.name.clone());
            }
            _ => {
                report.reinitialized_scalars += p.value.numel();
                report.reinitialized.push(p.name.clone());
            }
        }
    }
    Ok((HmaModel::from_parts(dst_cfg.clone(), params)?, report))
}
