//! Training loop with metrics, validation and checkpoint rotation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fdn_core::data::{add_awgn, PatchDataset};
use fdn_core::metrics::psnr;
use fdn_core::train::train_step;
use fdn_core::{FdnError, FlowModel, LatentMask, Result, Rng, Tensor};

use crate::checkpoint::{self, TrainState};
use crate::config::Config;
use crate::images::{check_image, denoise_all, load_dir, mean_std};

/// Checkpoints kept on disk during training.
pub const KEEP_CHECKPOINTS: usize = 2;

/// Clean validation images with their fixed noisy copies.
pub struct Validation {
    pub clean: Vec<Tensor>,
    pub noisy: Vec<Tensor>,
}

impl Validation {
    pub fn new(clean: Vec<Tensor>, config: &Config) -> Result<Self> {
        let mut rng = Rng::new(config.val_seed);
        let noisy = clean
            .iter()
            .map(|x| {
                let sigma = config.sigma.draw(&mut rng);
                add_awgn(x, sigma, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Validation { clean, noisy })
    }

    /// Mean per-image PSNR of the noisy inputs.
    pub fn baseline(&self) -> Result<f64> {
        let v: Vec<f64> = self
            .noisy
            .iter()
            .zip(&self.clean)
            .map(|(y, x)| psnr(y, x, 1.0))
            .collect::<Result<_>>()?;
        Ok(mean_std(&v).0)
    }

    /// Mean per-image PSNR of the denoised estimates.
    pub fn score(&self, model: &FlowModel, mask: &LatentMask) -> Result<f64> {
        let den = denoise_all(model, mask, &self.noisy)?;
        let v: Vec<f64> = den
            .iter()
            .zip(&self.clean)
            .map(|(d, x)| psnr(d, x, 1.0))
            .collect::<Result<_>>()?;
        Ok(mean_std(&v).0)
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub last_val_psnr: Option<f64>,
}

fn emit(line: &str, file: &mut File, echo: &mut dyn Write) -> Result<()> {
    writeln!(file, "{line}")?;
    writeln!(echo, "{line}")?;
    Ok(())
}

/// Runs training as configured. Metrics lines go to `<out_dir>/metrics.txt`
/// and to `echo`. With `resume`, continues from that checkpoint up to
/// `config.iters`; the model and mask settings must match.
pub fn run(config: Config, resume: Option<&Path>, echo: &mut dyn Write) -> Result<TrainOutcome> {
    config.validate()?;
    let train_dir = config
        .train_dir
        .clone()
        .ok_or_else(|| FdnError::Config("data.train_dir is required for training".into()))?;
    let images = load_dir(&train_dir)?;
    let val_images = match &config.val_dir {
        Some(d) => Some(load_dir(d)?),
        None => None,
    };

    let mut state = match resume {
        Some(path) => {
            let prev = checkpoint::load(path)?;
            if prev.config.model_config() != config.model_config()
                || prev.config.clean_fraction != config.clean_fraction
            {
                return Err(FdnError::Config(
                    "resume checkpoint has a different model or mask".into(),
                ));
            }
            TrainState {
                config: config.clone(),
                adam: prev.adam,
                ..prev
            }
        }
        None => TrainState::new(config.clone())?,
    };
    state.adam.config = checkpoint::adam_config(&config);
    for im in images.iter().chain(val_images.iter().flatten()) {
        check_image(&state.model, im)?;
    }
    let dataset = PatchDataset::new(images, config.patch, config.crop, config.aug, config.sigma)?;
    let validation = val_images
        .map(|v| Validation::new(v, &config))
        .transpose()?;
    let weights = config.loss_weights()?;

    fs::create_dir_all(&config.out_dir)?;
    let metrics_path = config.out_dir.join("metrics.txt");
    let mut metrics = if resume.is_some() {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    if let Some(v) = &validation {
        emit(
            &format!("val_baseline psnr={:.6}", v.baseline()?),
            &mut metrics,
            echo,
        )?;
    }

    if !state.model.is_initialized() {
        let (_, noisy) = dataset.next_batch(config.batch, &mut state.rng)?;
        state.model.initialize_actnorm(&noisy)?;
    }

    let mut last_val = None;
    let mut saved = None;
    while state.iteration < config.iters {
        let (clean, noisy) = dataset.next_batch(config.batch, &mut state.rng)?;
        let t = state.adam.t;
        let m = train_step(
            &mut state.model,
            &noisy,
            &clean,
            &state.mask,
            weights,
            &mut state.adam,
            config.clip,
        )?;
        state.iteration += 1;
        emit(
            &format!(
                "iter={t} ldis={:e} lrec={:e} total={:e} bpd={:e} gnorm={:e} lr={:e}",
                m.ldis, m.lrec, m.total, m.bpd, m.grad_norm, m.lr
            ),
            &mut metrics,
            echo,
        )?;
        let done = state.iteration == config.iters;
        if let Some(v) = &validation {
            if state.iteration % config.val_every == 0 || done {
                let p = v.score(&state.model, &state.mask)?;
                emit(
                    &format!("val iter={} psnr={:.6}", state.iteration, p),
                    &mut metrics,
                    echo,
                )?;
                last_val = Some(p);
            }
        }
        if state.iteration % config.checkpoint_every == 0 || done {
            saved = Some(checkpoint::save_rotating(
                &config.out_dir,
                &state,
                KEEP_CHECKPOINTS,
            )?);
        }
    }
    let checkpoint = match saved {
        Some(p) => p,
        None => checkpoint::save_rotating(&config.out_dir, &state, KEEP_CHECKPOINTS)?,
    };
    writeln!(echo, "checkpoint {}", checkpoint.display())?;
    Ok(TrainOutcome {
        state,
        checkpoint,
        last_val_psnr: last_val,
    })
}
