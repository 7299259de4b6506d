//! Training objective: Gaussian negative log-likelihood of the latent plus an
//! L1 reconstruction term on the decoded clean estimate.

use std::f64::consts::{LN_2, PI};

use crate::error::{FdnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(lambda1) || !ok(lambda2) || lambda1 + lambda2 <= 0.0 {
            return Err(FdnError::Config(format!(
                "loss weights must be non-negative with a positive sum, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }

    /// `lambda1 = 1 / (d ln 2)` so the likelihood term is in bits per
    /// dimension, `lambda2 = 1`.
    pub fn default_for_dim(dim: usize) -> Self {
        LossWeights {
            lambda1: 1.0 / (dim as f64 * LN_2),
            lambda2: 1.0,
        }
    }
}

/// `sum_i [-ln(2 pi)/2 - z_i^2 / 2]` per batch entry.
pub fn gaussian_logprob(z: &Tensor) -> Vec<f64> {
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    (0..z.n())
        .map(|b| {
            z.sample(b)
                .iter()
                .map(|v| -half_log_2pi - 0.5 * v * v)
                .sum()
        })
        .collect()
}

/// Negative log-likelihood per batch entry, `-(log p(z) + logdet)`.
pub fn loss_dis(z: &Tensor, logdet: &[f64]) -> Result<Vec<f64>> {
    if logdet.len() != z.n() {
        return Err(FdnError::pre(
            "one log-determinant per batch entry required",
        ));
    }
    Ok(gaussian_logprob(z)
        .iter()
        .zip(logdet)
        .map(|(lp, ld)| -(lp + ld))
        .collect())
}

pub fn bits_per_dim(nll: f64, dim: usize) -> f64 {
    nll / (dim as f64 * LN_2)
}

/// Mean absolute deviation per batch entry.
pub fn loss_rec(x_hat: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    if x_hat.dims() != x.dims() {
        return Err(FdnError::ShapeMismatch(x_hat.dims(), x.dims()));
    }
    let d = x.sample_len() as f64;
    Ok((0..x.n())
        .map(|b| {
            x_hat
                .sample(b)
                .iter()
                .zip(x.sample(b))
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
                / d
        })
        .collect())
}

/// `lambda1 * ldis + lambda2 * lrec`, averaged over the batch.
pub fn total_loss(ldis: &[f64], lrec: &[f64], weights: LossWeights) -> f64 {
    let n = ldis.len().max(1) as f64;
    ldis.iter()
        .zip(lrec)
        .map(|(d, r)| weights.lambda1 * d + weights.lambda2 * r)
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn logprob_closed_forms() {
        let z = Tensor::zeros([1, 1, 2, 2]).unwrap();
        assert!((gaussian_logprob(&z)[0] - -3.6757541328186907).abs() < 1e-12);
        let one = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        assert!((gaussian_logprob(&one)[0] - -1.4189385332046727).abs() < 1e-12);
    }

    #[test]
    fn logprob_matches_per_element_oracle() {
        let z = Tensor::randn([3, 2, 4, 4], &mut Rng::new(1)).unwrap();
        let lp = gaussian_logprob(&z);
        for b in 0..3 {
            let mut oracle = 0.0;
            for &v in z.sample(b) {
                oracle += (-(v * v) / 2.0).exp().ln() - (2.0 * PI).sqrt().ln();
            }
            assert!((lp[b] - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_dis_examples() {
        let z = Tensor::zeros([1, 1, 2, 2]).unwrap();
        let base = loss_dis(&z, &[0.0]).unwrap()[0];
        assert!((base - 3.6757541328186907).abs() < 1e-12);
        let shifted = loss_dis(&z, &[5.0]).unwrap()[0];
        assert!((base - shifted - 5.0).abs() < 1e-12);
        assert!((bits_per_dim(4.0 * LN_2, 4) - 1.0).abs() < 1e-15);
        assert!(loss_dis(&z, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn loss_rec_examples() {
        let x = Tensor::randn([2, 1, 3, 3], &mut Rng::new(2)).unwrap();
        assert_eq!(loss_rec(&x, &x).unwrap(), vec![0.0, 0.0]);
        let up = x.map(|v| v + 0.5).unwrap();
        for v in loss_rec(&up, &x).unwrap() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!(loss_rec(&x, &Tensor::zeros([2, 1, 3, 2]).unwrap()).is_err());

        let y = Tensor::randn([2, 1, 3, 3], &mut Rng::new(3)).unwrap();
        let got = loss_rec(&x, &y).unwrap();
        for b in 0..2 {
            let mut s = 0.0;
            for i in 0..9 {
                s += (x.data()[b * 9 + i] - y.data()[b * 9 + i]).abs();
            }
            assert!((got[b] - s / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = |a, b| LossWeights::new(a, b).unwrap();
        assert_eq!(total_loss(&[2.0], &[3.0], w(1.0, 0.0)), 2.0);
        assert_eq!(total_loss(&[2.0], &[3.0], w(0.0, 1.0)), 3.0);
        assert_eq!(total_loss(&[2.0], &[3.0], w(1.0, 1.0)), 5.0);
        assert_eq!(total_loss(&[2.0, 4.0], &[0.0, 0.0], w(1.0, 1.0)), 3.0);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 2.0).is_err());
    }
}
