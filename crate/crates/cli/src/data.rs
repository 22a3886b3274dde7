//! Folder loading shared by the subcommands.

use std::path::{Path, PathBuf};

use hma_core::imaging::{degrade, load_image, PatchPair};
use hma_core::model::HmaConfig;
use hma_core::training::Checkpoint;
use hma_core::ImageF32;

use crate::{CliResult, Failure};

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Image files directly inside `dir`, sorted by name.
pub fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(Failure::data(format!("{}: no PNG or PPM images", dir.display())));
    }
    files.sort();
    Ok(files)
}

pub fn load_f32(path: &Path) -> CliResult<ImageF32> {
    Ok(load_image(path)?.to_f32())
}

/// HR images cropped to a multiple of `scale`, paired with their bicubic
/// degradations.
pub fn training_pairs(dir: &Path, scale: usize) -> CliResult<Vec<PatchPair>> {
    image_files(dir)?
        .iter()
        .map(|path| {
            let img = load_f32(path)?;
            let (h, w) = img.dims();
            let hr = img.crop(0, 0, h - h % scale, w - w % scale)?;
            let lr = degrade(&hr, scale)?;
            Ok(PatchPair { lr, hr })
        })
        .collect()
}

pub fn read_config(path: &Path) -> CliResult<HmaConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    HmaConfig::from_json(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

/// File stem used to label report rows.
pub fn stem(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
