//! Image directory helpers and batched inference.

use std::path::{Path, PathBuf};

use fdn_core::{denoise, FdnError, FlowModel, LatentMask, Result, Tensor};

const EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files in `dir`, sorted by name. A file path is returned as is.
pub fn image_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads every image of `dir`; fails on the first unreadable file.
pub fn load_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let paths = image_paths(dir)?;
    if paths.is_empty() {
        return Err(FdnError::Precondition(format!(
            "no PGM/PPM images in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            fdn_core::data::load_image(p)
                .map_err(|e| FdnError::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Checks that `image` can pass through `model`.
pub fn check_image(model: &FlowModel, image: &Tensor) -> Result<()> {
    let c = model.config();
    let m = c.required_multiple();
    if image.c() != c.in_channels {
        return Err(FdnError::Precondition(format!(
            "image has {} channels, model expects {}",
            image.c(),
            c.in_channels
        )));
    }
    if !image.h().is_multiple_of(m) || !image.w().is_multiple_of(m) {
        return Err(FdnError::Precondition(format!(
            "image is {}x{}; both dims must be multiples of {m}",
            image.h(),
            image.w()
        )));
    }
    Ok(())
}

pub const INFER_BATCH: usize = 16;

/// Applies `f` to runs of up to [`INFER_BATCH`] consecutive same-sized
/// single images, returning one output per input.
pub fn map_batched(
    images: &[Tensor],
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let dims = images[start].dims();
        let mut end = start + 1;
        while end < images.len() && end - start < INFER_BATCH && images[end].dims() == dims {
            end += 1;
        }
        let batch = Tensor::stack(&images[start..end])?;
        let result = f(&batch)?;
        for i in 0..end - start {
            out.push(result.slice_batch(i, 1)?);
        }
        start = end;
    }
    Ok(out)
}

pub fn denoise_all(model: &FlowModel, mask: &LatentMask, images: &[Tensor]) -> Result<Vec<Tensor>> {
    map_batched(images, |b| denoise(model, mask, b))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean.is_infinite() {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
