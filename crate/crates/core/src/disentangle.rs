//! Latent masking: splitting the latent into clean and noise channel groups,
//! denoising by zeroing the noise group, and generating noisy variants by
//! resampling it.

use crate::error::{FdnError, Result};
use crate::model::FlowModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-channel mask over the latent. Clean channels come first.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMask {
    total_channels: usize,
    clean_fraction: f64,
    clean_channels: usize,
}

impl LatentMask {
    pub fn new(total_channels: usize, clean_fraction: f64) -> Result<Self> {
        if total_channels == 0 {
            return Err(FdnError::pre("mask needs at least one channel"));
        }
        if !(clean_fraction > 0.0 && clean_fraction <= 1.0) {
            return Err(FdnError::pre(format!(
                "clean fraction must be in (0, 1], got {clean_fraction}"
            )));
        }
        let clean_channels = (clean_fraction * total_channels as f64).round() as usize;
        Ok(LatentMask {
            total_channels,
            clean_fraction,
            clean_channels,
        })
    }

    pub fn total_channels(&self) -> usize {
        self.total_channels
    }

    pub fn clean_fraction(&self) -> f64 {
        self.clean_fraction
    }

    pub fn clean_channels(&self) -> usize {
        self.clean_channels
    }

    pub fn noise_channels(&self) -> usize {
        self.total_channels - self.clean_channels
    }

    pub fn is_clean(&self, channel: usize) -> bool {
        channel < self.clean_channels
    }

    /// The binary vector `m` (1 = clean).
    pub fn values(&self) -> Vec<f64> {
        (0..self.total_channels)
            .map(|c| if self.is_clean(c) { 1.0 } else { 0.0 })
            .collect()
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.c() != self.total_channels {
            return Err(FdnError::pre(format!(
                "mask covers {} channels, latent has {}",
                self.total_channels,
                z.c()
            )));
        }
        Ok(())
    }

    /// `m * z`: noise channels set to exactly 0, clean channels copied.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let mut out = z.clone();
        self.zero_noise(out.data_mut(), z.dims());
        Ok(out)
    }

    /// Zeroes the noise channels of a raw `(n, c, h, w)` buffer in place.
    pub(crate) fn zero_noise(&self, data: &mut [f64], dims: [usize; 4]) {
        let [_, c, h, w] = dims;
        let hw = h * w;
        for (plane, vals) in data.chunks_exact_mut(hw).enumerate() {
            if !self.is_clean(plane % c) {
                vals.fill(0.0);
            }
        }
    }
}

/// `x_hat = f^{-1}(m * f(y))`, clamped to `[0, 1]`.
pub fn denoise(model: &FlowModel, mask: &LatentMask, y: &Tensor) -> Result<Tensor> {
    Ok(decode_masked(model, mask, y)?.clamp(0.0, 1.0))
}

/// Denoised estimate before clamping.
pub fn decode_masked(model: &FlowModel, mask: &LatentMask, y: &Tensor) -> Result<Tensor> {
    let (z, _) = model.forward(y)?;
    model.inverse(&mask.apply(&z)?)
}

/// Replaces the noise sub-latent of `f(x_clean)` by
/// `alpha * eps + (1 - alpha) * z_noise` with fresh `eps ~ N(0, I)`, then
/// decodes. Clean channels are untouched. Not clamped.
pub fn sample_noisy(
    model: &FlowModel,
    mask: &LatentMask,
    x_clean: &Tensor,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FdnError::pre(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let (mut z, _) = model.forward(x_clean)?;
    mask.check(&z)?;
    let [_, c, h, w] = z.dims();
    let hw = h * w;
    for (plane, vals) in z.data_mut().chunks_exact_mut(hw).enumerate() {
        if !mask.is_clean(plane % c) {
            for v in vals {
                *v = alpha * rng.normal() + (1.0 - alpha) * *v;
            }
        }
    }
    model.inverse(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn mask_counts() {
        let m = LatentMask::new(48, 0.75).unwrap();
        assert_eq!((m.clean_channels(), m.noise_channels()), (36, 12));
        let all = LatentMask::new(8, 1.0).unwrap();
        assert_eq!(all.values(), vec![1.0; 8]);
        let one = LatentMask::new(8, 0.125).unwrap();
        assert_eq!(one.clean_channels(), 1);
        assert!(LatentMask::new(8, 0.0).is_err());
        assert!(LatentMask::new(8, 1.5).is_err());
        assert!(LatentMask::new(0, 0.5).is_err());
    }

    #[test]
    fn apply_examples() {
        let mut rng = Rng::new(0);
        let z = Tensor::randn([2, 4, 2, 2], &mut rng).unwrap();
        assert_eq!(LatentMask::new(4, 1.0).unwrap().apply(&z).unwrap(), z);
        let half = LatentMask::new(4, 0.5).unwrap().apply(&z).unwrap();
        for b in 0..2 {
            assert_eq!(&half.sample(b)[..8], &z.sample(b)[..8]);
            assert!(half.sample(b)[8..].iter().all(|&v| v == 0.0));
        }
        assert!(LatentMask::new(5, 0.5).unwrap().apply(&z).is_err());
    }

    #[test]
    fn identity_model_zeroes_checkerboard() {
        // 1x2x2 image, one squeeze: channel k holds pixel (k/2, k%2).
        let cfg = ModelConfig {
            in_channels: 1,
            height: 2,
            width: 2,
            n_flow_blocks: 1,
            n_sof: 1,
            dense_width: 2,
            clamp: 2.0,
        };
        let model = FlowModel::identity(cfg, &mut Rng::new(0)).unwrap();
        let y = Tensor::from_vec([1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mask = LatentMask::new(4, 0.5).unwrap();
        let x = denoise(&model, &mask, &y).unwrap();
        assert_eq!(x.data(), &[0.1, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn alpha_out_of_range() {
        let cfg = ModelConfig {
            in_channels: 1,
            height: 2,
            width: 2,
            n_flow_blocks: 1,
            n_sof: 1,
            dense_width: 2,
            clamp: 2.0,
        };
        let model = FlowModel::identity(cfg, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros([1, 1, 2, 2]).unwrap();
        let mask = LatentMask::new(4, 0.5).unwrap();
        assert!(sample_noisy(&model, &mask, &x, 1.5, &mut Rng::new(1)).is_err());
    }
}
