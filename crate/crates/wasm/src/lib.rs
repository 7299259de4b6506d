//! Browser bindings: noise synthesis and metrics, a small in-page trainer,
//! masked denoising and noisy resampling. Images cross the boundary as
//! row-major 8-bit grayscale buffers.

use wasm_bindgen::prelude::*;

use fdn_core::data::{add_awgn, synth, AugPolicy, CropPolicy, PatchDataset, SigmaPolicy};
use fdn_core::metrics;
use fdn_core::train::train_step;
use fdn_core::{
    denoise, sample_noisy, AdamConfig, AdamState, FlowModel, LatentMask, LossWeights, ModelConfig,
    Rng, Tensor,
};

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_tensor(pixels: &[u8], width: usize, height: usize) -> Result<Tensor, JsError> {
    if pixels.len() != width * height {
        return Err(err(format!(
            "expected {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    Tensor::from_vec(
        [1, 1, height, width],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .map_err(err)
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .map(|&v| fdn_core::data::pnm::to_byte(v))
        .collect()
}

/// A synthetic grayscale test image.
#[wasm_bindgen]
pub fn blob_image(size: usize, seed: u64) -> Vec<u8> {
    to_bytes(&synth::textured_blob(size, 1, &mut Rng::new(seed)))
}

/// Adds Gaussian noise with standard deviation `sigma` on the 0-255 scale.
#[wasm_bindgen]
pub fn add_noise(
    pixels: &[u8],
    width: usize,
    height: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<u8>, JsError> {
    let x = to_tensor(pixels, width, height)?;
    Ok(to_bytes(
        &add_awgn(&x, sigma, &mut Rng::new(seed)).map_err(err)?,
    ))
}

#[wasm_bindgen]
pub fn psnr(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, JsError> {
    metrics::psnr(
        &to_tensor(a, width, height)?,
        &to_tensor(b, width, height)?,
        1.0,
    )
    .map_err(err)
}

#[wasm_bindgen]
pub fn ssim(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, JsError> {
    metrics::ssim(&to_tensor(a, width, height)?, &to_tensor(b, width, height)?).map_err(err)
}

/// A small flow trained in the page on synthetic patches.
#[wasm_bindgen]
pub struct Trainer {
    model: FlowModel,
    adam: AdamState,
    dataset: PatchDataset,
    mask: LatentMask,
    weights: LossWeights,
    rng: Rng,
    batch: usize,
    last_loss: f64,
}

#[wasm_bindgen]
impl Trainer {
    /// `patch` must be a multiple of 4; `clean_fraction` in (0, 1].
    #[wasm_bindgen(constructor)]
    pub fn new(
        patch: usize,
        sigma: f64,
        clean_fraction: f64,
        seed: u64,
    ) -> Result<Trainer, JsError> {
        let config = ModelConfig {
            in_channels: 1,
            height: patch,
            width: patch,
            n_flow_blocks: 2,
            n_sof: 2,
            dense_width: 8,
            clamp: 2.0,
        };
        let mut rng = Rng::new(seed);
        let model = FlowModel::new(config.clone(), &mut rng).map_err(err)?;
        let images = synth::textured_blobs(256, patch, 1, &mut rng);
        let dataset = PatchDataset::new(
            images,
            patch,
            CropPolicy::Random,
            AugPolicy::FlipH,
            SigmaPolicy::Fixed(sigma),
        )
        .map_err(err)?;
        let mask = LatentMask::new(config.latent_channels(), clean_fraction).map_err(err)?;
        let adam = AdamState::for_params(
            AdamConfig {
                base_lr: 1e-3,
                ..AdamConfig::default()
            },
            &model.params(),
        );
        Ok(Trainer {
            model,
            adam,
            dataset,
            mask,
            weights: LossWeights::default_for_dim(patch * patch),
            rng,
            batch: 8,
            last_loss: f64::NAN,
        })
    }

    /// Runs `count` training iterations; returns the last total loss.
    pub fn train(&mut self, count: usize) -> Result<f64, JsError> {
        for _ in 0..count {
            let (clean, noisy) = self
                .dataset
                .next_batch(self.batch, &mut self.rng)
                .map_err(err)?;
            let m = train_step(
                &mut self.model,
                &noisy,
                &clean,
                &self.mask,
                self.weights,
                &mut self.adam,
                Some(50.0),
            )
            .map_err(err)?;
            self.last_loss = m.total;
        }
        Ok(self.last_loss)
    }

    pub fn iterations(&self) -> u64 {
        self.adam.t
    }

    /// Denoises with the mask's clean share set to `clean_fraction`, which
    /// need not match the training value.
    pub fn denoise(
        &self,
        pixels: &[u8],
        width: usize,
        height: usize,
        clean_fraction: f64,
    ) -> Result<Vec<u8>, JsError> {
        let y = self.input(pixels, width, height)?;
        let mask = LatentMask::new(self.mask.total_channels(), clean_fraction).map_err(err)?;
        Ok(to_bytes(&denoise(&self.model, &mask, &y).map_err(err)?))
    }

    /// A new noisy variant: the noise latents move toward fresh Gaussian
    /// draws by `alpha`.
    pub fn sample(
        &self,
        pixels: &[u8],
        width: usize,
        height: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Vec<u8>, JsError> {
        let x = self.input(pixels, width, height)?;
        let y =
            sample_noisy(&self.model, &self.mask, &x, alpha, &mut Rng::new(seed)).map_err(err)?;
        Ok(to_bytes(&y))
    }

    fn input(&self, pixels: &[u8], width: usize, height: usize) -> Result<Tensor, JsError> {
        if !self.model.is_initialized() {
            return Err(err("train for at least one iteration first"));
        }
        to_tensor(pixels, width, height)
    }
}
