//! Inference subcommands: denoise, eval and sample.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fdn_core::data::{add_awgn, load_image, save_image, SigmaPolicy};
use fdn_core::metrics::{psnr, ssim, SSIM_WINDOW};
use fdn_core::{denoise, sample_noisy, FdnError, Result, Rng, Tensor};

use crate::checkpoint::{self, TrainState};
use crate::images::{check_image, denoise_all, image_paths, load_dir, mean_std};

pub struct DenoiseSummary {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

/// Denoises one file or every image of a directory into `out_dir`, keeping
/// file names. A file that cannot be processed is reported in `warn` and
/// skipped. The checkpoint is loaded before anything is written.
pub fn denoise_cmd(
    ckpt: &Path,
    input: &Path,
    out_dir: &Path,
    gt_dir: Option<&Path>,
    out: &mut dyn Write,
    warn: &mut dyn Write,
) -> Result<DenoiseSummary> {
    let state = checkpoint::load(ckpt)?;
    let paths = image_paths(input)?;
    if paths.is_empty() {
        return Err(FdnError::Precondition(format!(
            "no PGM/PPM images in {}",
            input.display()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut summary = DenoiseSummary {
        written: Vec::new(),
        failed: Vec::new(),
    };
    for path in paths {
        let name = path.file_name().map(PathBuf::from).unwrap_or_default();
        let result = (|| -> Result<Option<f64>> {
            let y = load_image(&path)?;
            check_image(&state.model, &y)?;
            let x_hat = denoise(&state.model, &state.mask, &y)?;
            let target = out_dir.join(&name);
            save_image(&target, &x_hat)?;
            let score = match gt_dir {
                Some(gt) => Some(psnr(&x_hat, &load_image(gt.join(&name))?, 1.0)?),
                None => None,
            };
            Ok(score)
        })();
        match result {
            Ok(score) => {
                match score {
                    Some(p) => writeln!(out, "{} psnr={p:.4}", name.display())?,
                    None => writeln!(out, "{}", name.display())?,
                }
                summary.written.push(out_dir.join(&name));
            }
            Err(e) => {
                writeln!(warn, "warning: skipping {}: {e}", path.display())?;
                summary.failed.push((path, e.to_string()));
            }
        }
    }
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    fn of(v: &[f64]) -> Stats {
        let (mean, std) = mean_std(v);
        Stats { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub psnr: Stats,
    /// `None` when an image is smaller than the SSIM window.
    pub ssim: Option<Stats>,
    pub baseline_psnr: Stats,
    pub baseline_ssim: Option<Stats>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |s: Option<Stats>| {
            s.map_or("n/a".to_string(), |s| {
                format!("{:.4} +- {:.4}", s.mean, s.std)
            })
        };
        writeln!(f, "images {}", self.images)?;
        writeln!(
            f,
            "denoised psnr {:.4} +- {:.4}",
            self.psnr.mean, self.psnr.std
        )?;
        writeln!(f, "denoised ssim {}", opt(self.ssim))?;
        writeln!(
            f,
            "noisy psnr {:.4} +- {:.4}",
            self.baseline_psnr.mean, self.baseline_psnr.std
        )?;
        write!(f, "noisy ssim {}", opt(self.baseline_ssim))
    }
}

/// Adds synthetic noise to every clean image, denoises and scores.
pub fn evaluate(
    state: &TrainState,
    clean: &[Tensor],
    sigma: SigmaPolicy,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = Rng::new(seed);
    let mut noisy = Vec::with_capacity(clean.len());
    for x in clean {
        check_image(&state.model, x)?;
        let s = sigma.draw(&mut rng);
        noisy.push(add_awgn(x, s, &mut rng)?);
    }
    let denoised = denoise_all(&state.model, &state.mask, &noisy)?;
    let fits = clean
        .iter()
        .all(|x| x.h() >= SSIM_WINDOW && x.w() >= SSIM_WINDOW);
    let score = |imgs: &[Tensor]| -> Result<(Stats, Option<Stats>)> {
        let p: Vec<f64> = imgs
            .iter()
            .zip(clean)
            .map(|(a, x)| psnr(a, x, 1.0))
            .collect::<Result<_>>()?;
        let s = if fits {
            let v: Vec<f64> = imgs
                .iter()
                .zip(clean)
                .map(|(a, x)| ssim(a, x))
                .collect::<Result<_>>()?;
            Some(Stats::of(&v))
        } else {
            None
        };
        Ok((Stats::of(&p), s))
    };
    let (psnr_d, ssim_d) = score(&denoised)?;
    let (psnr_n, ssim_n) = score(&noisy)?;
    Ok(EvalReport {
        images: clean.len(),
        psnr: psnr_d,
        ssim: ssim_d,
        baseline_psnr: psnr_n,
        baseline_ssim: ssim_n,
    })
}

pub fn eval_cmd(
    ckpt: &Path,
    clean_dir: &Path,
    sigma: SigmaPolicy,
    seed: u64,
    out: &mut dyn Write,
) -> Result<EvalReport> {
    let state = checkpoint::load(ckpt)?;
    let clean = load_dir(clean_dir)?;
    let report = evaluate(&state, &clean, sigma, seed)?;
    writeln!(out, "{report}")?;
    Ok(report)
}

pub struct SampleSummary {
    pub written: Vec<PathBuf>,
    /// Largest difference between the clean latents of a re-encoded sample
    /// and those of the source.
    pub reencode_error: f64,
}

/// Writes `count` noisy variants of `input`. Without `alpha`, each variant
/// draws its own mixing weight uniformly from `[0, 1]`.
pub fn sample_cmd(
    ckpt: &Path,
    input: &Path,
    count: usize,
    alpha: Option<f64>,
    seed: u64,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<SampleSummary> {
    let state = checkpoint::load(ckpt)?;
    let x = load_image(input)?;
    check_image(&state.model, &x)?;
    fs::create_dir_all(out_dir)?;
    let (z_src, _) = state.model.forward(&x)?;
    let mut rng = Rng::new(seed);
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample");
    let ext = if x.c() == 1 { "pgm" } else { "ppm" };
    let mut summary = SampleSummary {
        written: Vec::new(),
        reencode_error: 0.0,
    };
    for i in 0..count {
        let a = match alpha {
            Some(a) => a,
            None => rng.uniform(),
        };
        let y = sample_noisy(&state.model, &state.mask, &x, a, &mut rng)?;
        let (z, _) = state.model.forward(&y)?;
        let err = clean_latent_diff(&z, &z_src, &state);
        summary.reencode_error = summary.reencode_error.max(err);
        let path = out_dir.join(format!("{stem}_{i:03}.{ext}"));
        save_image(&path, &y)?;
        writeln!(
            out,
            "{} alpha={a:.4} clean_latent_err={err:e}",
            path.display()
        )?;
        summary.written.push(path);
    }
    writeln!(
        out,
        "reencode clean_latent_max_err={:e}",
        summary.reencode_error
    )?;
    Ok(summary)
}

fn clean_latent_diff(a: &Tensor, b: &Tensor, state: &TrainState) -> f64 {
    let [_, c, h, w] = a.dims();
    let hw = h * w;
    a.data()
        .chunks_exact(hw)
        .zip(b.data().chunks_exact(hw))
        .enumerate()
        .filter(|(plane, _)| state.mask.is_clean(plane % c))
        .flat_map(|(_, (p, q))| p.iter().zip(q).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}
