//! Loss, optimizer, schedule, checkpoints, the training loop and
//! cross-scale parameter transfer.

mod adam;
mod checkpoint;
mod transfer;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use transfer::{transfer_parameters, TransferReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imaging::{augment, psnr_y, ImageF32, PatchPair};
use crate::model::HmaModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimization schedule and sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch: usize,
    pub lr0: f64,
    /// Iterations at which the learning rate halves.
    pub milestones: Vec<u64>,
    /// Side of the square low-resolution training crop.
    pub patch_lr: usize,
    pub seed: u64,
    /// Random flips and quarter turns.
    pub augment: bool,
    /// Loss-trace and progress interval.
    pub log_every: u64,
}

impl TrainConfig {
    /// Large-scale pre-training schedule.
    pub fn pretrain() -> Self {
        Self {
            total_iters: 800_000,
            batch: 32,
            lr0: 2e-4,
            milestones: vec![300_000, 500_000, 650_000, 700_000, 750_000],
            patch_lr: 64,
            seed: 0,
            augment: true,
            log_every: 100,
        }
    }

    /// Fine-tuning schedule applied after pre-training.
    pub fn finetune() -> Self {
        Self {
            total_iters: 250_000,
            lr0: 5e-6,
            milestones: vec![125_000, 200_000, 230_000, 240_000],
            ..Self::pretrain()
        }
    }

    /// Desk-scale schedule for the toy model.
    pub fn toy() -> Self {
        Self {
            total_iters: 2000,
            batch: 4,
            lr0: 2e-4,
            milestones: vec![1500],
            patch_lr: 16,
            seed: 0,
            augment: true,
            log_every: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pretrain" => Ok(Self::pretrain()),
            "finetune" => Ok(Self::finetune()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (pretrain, finetune, toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.batch == 0 || self.patch_lr == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "total_iters, batch, patch_lr and log_every must be positive".into(),
            ));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be finite and non-negative", self.lr0)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones {:?} must be strictly increasing", self.milestones)));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_iters) {
            return Err(Error::Config(format!(
                "milestones {:?} must lie below total_iters {}",
                self.milestones, self.total_iters
            )));
        }
        Ok(())
    }
}

/// `lr0 * 2^-(milestones passed)`; a milestone counts from its own iteration on.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= iter).count() as i32;
    cfg.lr0 * 0.5f64.powi(passed)
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", pred.shape(), target.shape()));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
        .sum();
    Ok(T::of(total / pred.numel().max(1) as f64))
}

/// Progress notifications from [`train_loop`].
#[derive(Clone, Copy, Debug)]
pub enum TrainEvent<'a, T> {
    /// Loss of the batch at `iter` (0-based), reported every `log_every`
    /// iterations and on the last one.
    Loss { iter: u64, loss: f64, lr: f64 },
    /// `iter` completed iterations reached a milestone or the end; the state
    /// is lent for checkpointing.
    Milestone {
        iter: u64,
        model: &'a HmaModel<T>,
        optimizer: &'a AdamState<T>,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// `(iteration, loss)` at every logged iteration.
    pub loss_trace: Vec<(u64, f64)>,
    pub optimizer: AdamState<T>,
    /// Completed iterations.
    pub iterations: u64,
}

/// One sampled training example: image index, crop origin and augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Draw {
    image: usize,
    y: usize,
    x: usize,
    flip: bool,
    rot: u8,
}

fn draw(rng: &mut ChaCha8Rng, data: &[PatchPair], patch: usize, augment: bool) -> Draw {
    let image = rng.random_range(0..data.len());
    let (h, w) = data[image].lr.dims();
    let y = rng.random_range(0..=h - patch);
    let x = rng.random_range(0..=w - patch);
    let (flip, rot) = if augment { (rng.random::<bool>(), rng.random_range(0..4u8)) } else { (false, 0) };
    Draw { image, y, x, flip, rot }
}

fn materialize(d: Draw, data: &[PatchPair], patch: usize) -> Result<PatchPair> {
    let src = &data[d.image];
    let s = src.scale();
    let pair = PatchPair {
        lr: src.lr.crop(d.y, d.x, patch, patch)?,
        hr: src.hr.crop(s * d.y, s * d.x, s * patch, s * patch)?,
    };
    augment(&pair, d.flip, d.rot)
}

/// Trains `model` in place on aligned LR/HR image pairs.
///
/// Each iteration draws `batch` crops (image, offset, flip, rotation) from a
/// generator seeded with `cfg.seed`, runs the network, back-propagates the L1
/// loss and takes one Adam step at `lr_at(iter)`. Resuming passes the
/// optimizer state and the number of iterations already completed; the
/// sampling stream is replayed so a resumed run matches an uninterrupted one.
pub fn train_loop<T: Scalar>(
    model: &mut HmaModel<T>,
    data: &[PatchPair],
    cfg: &TrainConfig,
    resume: Option<(AdamState<T>, u64)>,
    mut on_event: impl FnMut(TrainEvent<'_, T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_loop", "empty dataset"));
    }
    let scale = model.config.scale;
    for (i, p) in data.iter().enumerate() {
        let (h, w) = p.lr.dims();
        if p.hr.dims() != (h * scale, w * scale) {
            return Err(Error::invalid(
                "train_loop",
                format!("pair {i}: HR {:?} is not {scale}x LR {:?}", p.hr.dims(), p.lr.dims()),
            ));
        }
        if h < cfg.patch_lr || w < cfg.patch_lr {
            return Err(Error::invalid(
                "train_loop",
                format!("pair {i}: LR {h}x{w} smaller than patch {}", cfg.patch_lr),
            ));
        }
    }
    model.config.check_input(cfg.patch_lr, cfg.patch_lr)?;

    let (mut opt, start) = match resume {
        Some((opt, done)) => {
            opt.check_matches(&model.params)?;
            (opt, done)
        }
        None => (AdamState::new(&model.params), 0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..start * cfg.batch as u64 {
        draw(&mut rng, data, cfg.patch_lr, cfg.augment);
    }

    let mut trace = Vec::new();
    for iter in start..cfg.total_iters {
        let draws: Vec<Draw> = (0..cfg.batch)
            .map(|_| draw(&mut rng, data, cfg.patch_lr, cfg.augment))
            .collect();
        let pairs = draws
            .into_iter()
            .map(|d| materialize(d, data, cfg.patch_lr))
            .collect::<Result<Vec<_>>>()?;
        let lr_imgs: Vec<ImageF32> = pairs.iter().map(|p| p.lr.clone()).collect();
        let hr_imgs: Vec<ImageF32> = pairs.into_iter().map(|p| p.hr).collect();

        let loss = {
            let mut tape = Tape::new();
            let x = tape.constant(ImageF32::stack(&lr_imgs)?);
            let target = tape.constant(ImageF32::stack(&hr_imgs)?);
            let y = model.forward_tape(&mut tape, x, None)?;
            let l = tape.l1_loss(y, target)?;
            let loss = tape.value(l).item()?.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iter, loss });
            }
            model.params.zero_grads();
            tape.backward_into(l, &mut model.params)?;
            loss
        };
        let lr = lr_at(iter, cfg);
        adam_step(&mut model.params, &mut opt, lr)?;
        model.params.zero_grads();

        let done = iter + 1;
        if iter % cfg.log_every == 0 || done == cfg.total_iters {
            trace.push((iter, loss));
            on_event(TrainEvent::Loss { iter, loss, lr });
        }
        if cfg.milestones.contains(&done) || done == cfg.total_iters {
            on_event(TrainEvent::Milestone {
                iter: done,
                model,
                optimizer: &opt,
            });
        }
    }
    Ok(TrainOutcome {
        loss_trace: trace,
        optimizer: opt,
        iterations: cfg.total_iters.max(start),
    })
}

/// Mean luma PSNR of the model's full-image outputs (quantized to 8 bits)
/// against the HR images, with `crop` border pixels removed.
pub fn mean_psnr<T: Scalar>(model: &HmaModel<T>, data: &[PatchPair], crop: usize) -> Result<f64> {
    let mut total = 0.0;
    for p in data {
        let out = model.forward(&p.lr.to_tensor::<T>())?;
        let sr = ImageF32::from_tensor(&out, 0)?.quantized();
        total += psnr_y(&sr, &p.hr, crop)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Loss trace as CSV (`iter,loss`), losses with full round-trip precision.
pub fn loss_trace_csv(trace: &[(u64, f64)]) -> String {
    let mut s = String::from("iter,loss\n");
    for (i, l) in trace {
        s.push_str(&format!("{i},{l:?}\n"));
    }
    s
}
