use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use hma_core::analysis::{capture_features, probe_batch, CkaReport};
use hma_core::fsutil::write_atomic;
use hma_core::imaging::{bicubic_resize, degrade as bicubic_degrade, format_db, psnr_y, save_image, ssim_y, synthetic_texture};
use hma_core::model::{count_params_macs, tiled_inference, HmaModel};
use hma_core::training::{loss_trace_csv, train_loop, transfer_parameters, Checkpoint, TrainConfig, TrainEvent};
use hma_core::{ImageF32, Model32};

use crate::data::{image_files, load_f32, read_checkpoint, read_config, stem, training_pairs};
use crate::{CkaArgs, CliResult, CountArgs, DegradeArgs, EvalArgs, Failure, SynthArgs, TrainArgs, TransferArgs, UpscaleArgs};

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(a: TrainArgs) -> CliResult {
    let config = read_config(&a.config)?;
    let mut cfg = TrainConfig::preset(&a.preset)?;
    cfg.seed = a.seed;
    if let Some(n) = a.iters {
        cfg.total_iters = n;
        cfg.milestones.retain(|&m| m < n);
    }
    cfg.validate()?;
    let data = training_pairs(&a.data_dir, config.scale)?;

    let mut model = match &a.init_ckpt {
        Some(path) => {
            let (model, report) = transfer_parameters(&read_checkpoint(path)?, &config, a.seed)?;
            say_raw!("{report}");
            model
        }
        None => Model32::new(config, a.seed)?,
    };
    let trace_path = a.trace.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));

    say!(
        "training {} parameters on {} images: {} iterations, batch {}, patch {}",
        model.num_params(),
        data.len(),
        cfg.total_iters,
        cfg.batch,
        cfg.patch_lr
    );
    let start = Instant::now();
    let total = cfg.total_iters;
    let mut save_err = None;
    let outcome = train_loop(&mut model, &data, &cfg, None, |event| match event {
        TrainEvent::Loss { iter, loss, lr } => {
            if iter % 100 == 0 || iter + 1 == total {
                say!("iter {iter:>7}  loss {loss:.6}  lr {lr:.3e}  {:.1}s", start.elapsed().as_secs_f64());
            }
        }
        TrainEvent::Milestone { iter, model, optimizer } => {
            let path = if iter == total { a.out.clone() } else { with_suffix(&a.out, &format!(".iter{iter}")) };
            if let Err(e) = Checkpoint::from_model(model, Some(optimizer), iter).save(&path) {
                save_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    write_atomic(&trace_path, loss_trace_csv(&outcome.loss_trace).as_bytes())?;
    say!("wrote {} and {}", a.out.display(), trace_path.display());
    Ok(())
}

pub fn upscale(a: UpscaleArgs) -> CliResult {
    let model: Model32 = read_checkpoint(&a.ckpt)?.model()?;
    let img = load_f32(&a.input)?;
    let out = tiled_inference(&img, &model, a.tile, a.overlap)?;
    save_image(&out.to_u8(), &a.output)?;
    say!("{}x{} -> {}x{}", img.width(), img.height(), out.width(), out.height());
    Ok(())
}

/// Restores one HR image from its degradation, cropped back to the HR size.
fn restore(hr: &ImageF32, model: Option<&Model32>, scale: usize, tile: usize, overlap: usize) -> hma_core::Result<ImageF32> {
    let lr = bicubic_degrade(hr, scale)?;
    let (lh, lw) = lr.dims();
    let sr = match model {
        Some(m) => tiled_inference(&lr, m, tile, overlap)?,
        None => bicubic_resize(&lr, lh * scale, lw * scale, true)?,
    };
    let (h, w) = hr.dims();
    Ok(sr.crop(0, 0, h, w)?.quantized())
}

pub fn eval(a: EvalArgs) -> CliResult {
    if a.scale < 2 {
        return Err(Failure::usage(format!("--scale must be at least 2, got {}", a.scale)));
    }
    let model: Option<Model32> = match (&a.ckpt, a.bicubic) {
        (Some(path), false) => {
            let m: Model32 = read_checkpoint(path)?.model()?;
            if m.config.scale != a.scale {
                return Err(Failure::data(format!(
                    "checkpoint is a x{} model, --scale is {}",
                    m.config.scale, a.scale
                )));
            }
            Some(m)
        }
        _ => None,
    };
    let files = image_files(&a.hr_dir)?;
    let rows = files
        .par_iter()
        .map(|path| -> CliResult<(String, f64, f64)> {
            let hr = load_f32(path)?;
            let sr = restore(&hr, model.as_ref(), a.scale, a.tile, a.overlap)?;
            let psnr = psnr_y(&sr, &hr, a.scale)?;
            let ssim = ssim_y(&sr, &hr, a.scale)?;
            Ok((stem(path), psnr, ssim))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let mut csv = String::from("image,psnr_db,ssim\n");
    for (name, p, s) in &rows {
        csv.push_str(&format!("{name},{},{s:.6}\n", format_db(*p)));
    }
    csv.push_str(&format!("mean,{},{mean_ssim:.6}\n", format_db(mean_psnr)));
    write_atomic(&a.report, csv.as_bytes())?;
    say_raw!("{csv}");
    Ok(())
}

pub fn degrade(a: DegradeArgs) -> CliResult {
    if a.scale == 0 {
        return Err(Failure::usage("--scale must be positive"));
    }
    let img = load_f32(&a.input)?;
    let out = bicubic_degrade(&img, a.scale)?;
    save_image(&out.to_u8(), &a.output)?;
    say!("{}x{} -> {}x{}", img.width(), img.height(), out.width(), out.height());
    Ok(())
}

pub fn count(a: CountArgs) -> CliResult {
    let config = read_config(&a.config)?;
    config.validate()?;
    let c = count_params_macs(&config, (a.input_size, a.input_size));
    say!("input {0}x{0}, x{1}", a.input_size, config.scale);
    say!("{c}");
    say!(
        "{:.2}M parameters, {:.1}G multiply-adds",
        c.params as f64 / 1e6,
        c.macs as f64 / 1e9
    );
    Ok(())
}

fn default_selectors(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("layers.{i}.{prefix}")).collect()
}

pub fn cka(a: CkaArgs) -> CliResult {
    let model_a: Model32 = read_checkpoint(&a.ckpt_a)?.model()?;
    let model_b: Option<Model32> = a.ckpt_b.as_ref().map(|p| read_checkpoint(p)?.model().map_err(Failure::from)).transpose()?;
    let images = image_files(&a.probe_dir)?
        .iter()
        .map(|p| load_f32(p))
        .collect::<CliResult<Vec<_>>>()?;
    let blocks = model_a.config.n_rhtb;
    let (rows, cols) = match &model_b {
        None => (
            a.rows.clone().unwrap_or_else(|| default_selectors("gab.grid.g", blocks)),
            a.cols.clone().unwrap_or_else(|| default_selectors("gab.grid.q", blocks)),
        ),
        Some(_) => {
            let rows = a.rows.clone().unwrap_or_else(|| default_selectors("out", blocks));
            let cols = a.cols.clone().unwrap_or_else(|| rows.clone());
            (rows, cols)
        }
    };
    let probe = probe_batch::<f32>(&images, model_a.config.scale, a.patch, a.per_image, a.seed)?;
    let row_feats = capture_features(&model_a, &probe, &rows)?;
    let col_model: &HmaModel<f32> = model_b.as_ref().unwrap_or(&model_a);
    let col_feats = capture_features(col_model, &probe, &cols)?;
    let report = CkaReport::compute(&row_feats, &col_feats)?;
    let csv = report.to_csv();
    write_atomic(&a.report, csv.as_bytes())?;
    say_raw!("{csv}");
    if let Some(off) = report.off_diagonal_mean() {
        let diag = report.diagonal();
        let mean = diag.iter().sum::<f64>() / diag.len().max(1) as f64;
        say!("diagonal mean {mean:.6}, off-diagonal mean {off:.6}");
    }
    Ok(())
}

pub fn transfer(a: TransferArgs) -> CliResult {
    let src = read_checkpoint(&a.from)?;
    let config = read_config(&a.to_config)?;
    let (model, report) = transfer_parameters(&src, &config, a.seed)?;
    Checkpoint::from_model(&model, None, 0).save(&a.out)?;
    say_raw!("{report}");
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult {
    if a.size == 0 {
        return Err(Failure::usage("--size must be positive"));
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::data(format!("{}: {e}", a.out_dir.display())))?;
    for i in 0..a.count {
        let img = synthetic_texture(a.size, a.size, a.seed + i as u64)?;
        let path = a.out_dir.join(format!("texture_{i:03}.png"));
        save_image(&img.to_u8(), &path)?;
        say!("{}", path.display());
    }
    Ok(())
}
