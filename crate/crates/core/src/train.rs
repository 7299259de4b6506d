//! One optimization step of the two-term objective.
//!
//! The noisy batch is encoded, the noise channels of the latent are zeroed,
//! and the result is decoded through the same parameters. Gradients from the
//! decode path and from the likelihood of the encode path both accumulate
//! into one gradient set before the Adam update.

use crate::disentangle::LatentMask;
use crate::error::{FdnError, Result};
use crate::model::{FlowModel, Gradients};
use crate::objective::{bits_per_dim, loss_dis, loss_rec, total_loss, LossWeights};
use crate::optim::{clip_global_norm, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Batch-mean negative log-likelihood, nats.
    pub ldis: f64,
    /// Batch-mean L1 reconstruction error.
    pub lrec: f64,
    pub total: f64,
    pub bpd: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub clipped: bool,
}

/// Loss values for a batch, without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub ldis: f64,
    pub lrec: f64,
    pub total: f64,
    pub bpd: f64,
}

pub fn evaluate_loss(
    model: &FlowModel,
    noisy: &Tensor,
    clean: &Tensor,
    mask: &LatentMask,
    weights: LossWeights,
) -> Result<LossValues> {
    let (z, logdet) = model.forward(noisy)?;
    let ldis = loss_dis(&z, &logdet)?;
    let x_hat = model.inverse(&mask.apply(&z)?)?;
    let lrec = loss_rec(&x_hat, clean)?;
    Ok(summarize(&ldis, &lrec, weights, noisy.sample_len()))
}

fn summarize(ldis: &[f64], lrec: &[f64], weights: LossWeights, dim: usize) -> LossValues {
    let n = ldis.len() as f64;
    let ldis_mean = ldis.iter().sum::<f64>() / n;
    LossValues {
        ldis: ldis_mean,
        lrec: lrec.iter().sum::<f64>() / n,
        total: total_loss(ldis, lrec, weights),
        bpd: bits_per_dim(ldis_mean, dim),
    }
}

/// Loss values and exact gradients of the batch-mean total loss.
pub fn loss_and_gradients(
    model: &FlowModel,
    noisy: &Tensor,
    clean: &Tensor,
    mask: &LatentMask,
    weights: LossWeights,
) -> Result<(LossValues, Gradients)> {
    if noisy.dims() != clean.dims() {
        return Err(FdnError::ShapeMismatch(noisy.dims(), clean.dims()));
    }
    let n = noisy.n() as f64;
    let d = noisy.sample_len() as f64;
    let (z, logdet, ftape) = model.forward_cached(noisy)?;
    let ldis = loss_dis(&z, &logdet)?;
    let z_hat = mask.apply(&z)?;
    let (x_hat, itape) = model.inverse_cached(&z_hat)?;
    let lrec = loss_rec(&x_hat, clean)?;
    let values = summarize(&ldis, &lrec, weights, noisy.sample_len());

    let mut grads = Gradients::zeros_like(model);
    let rec_scale = weights.lambda2 / (n * d);
    let grad_x_hat: Vec<f64> = x_hat
        .data()
        .iter()
        .zip(clean.data())
        .map(|(p, q)| {
            let diff = p - q;
            if diff > 0.0 {
                rec_scale
            } else if diff < 0.0 {
                -rec_scale
            } else {
                0.0
            }
        })
        .collect();
    let mut grad_z = if weights.lambda2 != 0.0 {
        let mut g = model.backward_inverse(&itape, &grad_x_hat, &mut grads)?;
        mask.zero_noise(&mut g, z.dims());
        g
    } else {
        vec![0.0; z.len()]
    };
    // d(-log p(z))/dz = z
    let dis_scale = weights.lambda1 / n;
    for (g, v) in grad_z.iter_mut().zip(z.data()) {
        *g += dis_scale * v;
    }
    model.backward_forward(&ftape, &grad_z, -dis_scale, &mut grads)?;
    Ok((values, grads))
}

/// Full training step: actnorm init on the first batch if needed, loss and
/// gradients, optional global-norm clipping, Adam update, and the
/// invertibility check on the updated parameters.
pub fn train_step(
    model: &mut FlowModel,
    noisy: &Tensor,
    clean: &Tensor,
    mask: &LatentMask,
    weights: LossWeights,
    adam: &mut AdamState,
    clip: Option<f64>,
) -> Result<StepMetrics> {
    if !model.is_initialized() {
        model.initialize_actnorm(noisy)?;
    }
    let (values, mut grads) = loss_and_gradients(model, noisy, clean, mask, weights)?;
    if !values.total.is_finite() {
        return Err(FdnError::NonFinite("loss"));
    }
    let (grad_norm, clipped) = match clip {
        Some(max) => clip_global_norm(&mut grads, max),
        None => (grads.norm(), false),
    };
    let lr = adam.step(model.params_mut(), &grads)?;
    model.check_invertible()?;
    Ok(StepMetrics {
        ldis: values.ldis,
        lrec: values.lrec,
        total: values.total,
        bpd: values.bpd,
        grad_norm,
        lr,
        clipped,
    })
}
