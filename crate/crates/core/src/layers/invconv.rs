//! Invertible 1x1 convolution: a learned `c x c` channel mixing applied at
//! every spatial site.

use crate::conv::{gemm, MatRef};
use crate::error::{FdnError, Result};
use crate::linalg::{random_orthogonal, Lu};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InvConv {
    /// `(1, 1, c, c)`, row-major `W[out][in]`.
    pub weight: Tensor,
}

impl InvConv {
    /// Random orthogonal start (`log|det W| = 0`).
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let q = random_orthogonal(channels, rng);
        InvConv {
            weight: Tensor::from_vec([1, 1, channels, channels], q).expect("finite"),
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for i in 0..channels {
            w[i * channels + i] = 1.0;
        }
        InvConv {
            weight: Tensor::from_vec([1, 1, channels, channels], w).expect("finite"),
        }
    }

    pub fn from_matrix(channels: usize, w: Vec<f64>) -> Result<Self> {
        let layer = InvConv {
            weight: Tensor::from_vec([1, 1, channels, channels], w)?,
        };
        layer.factor()?;
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.weight.h()
    }

    pub fn factor(&self) -> Result<Lu> {
        Lu::factor(self.weight.data(), self.channels())
    }

    fn check_channels(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.channels() {
            return Err(FdnError::pre(format!(
                "1x1 conv expects {} channels, got {}",
                self.channels(),
                x.c()
            )));
        }
        Ok(())
    }

    fn mix(matrix: &[f64], x: &Tensor, origin: &'static str) -> Result<Tensor> {
        let [n, c, h, w] = x.dims();
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let s = b * c * hw..(b + 1) * c * hw;
            gemm(
                c,
                c,
                hw,
                1.0,
                MatRef::rows(matrix, c),
                MatRef::rows(&x.data()[s.clone()], hw),
                0.0,
                &mut out[s],
            );
        }
        Tensor::from_parts(x.dims(), out, origin)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        self.check_channels(x)?;
        let lu = self.factor()?;
        let out = Self::mix(self.weight.data(), x, "1x1 conv forward")?;
        Ok((out, (x.h() * x.w()) as f64 * lu.log_abs_det()))
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        self.check_channels(y)?;
        let inv = self.factor()?.inverse();
        Self::mix(&inv, y, "1x1 conv inverse")
    }

    /// `grads` = [weight].
    pub(crate) fn backward_forward(
        &self,
        input: &Tensor,
        grad_out: &[f64],
        logdet_weight: f64,
        grads: &mut [Vec<f64>],
    ) -> Result<Vec<f64>> {
        let [n, c, h, w] = input.dims();
        let hw = h * w;
        let mut grad_in = vec![0.0; input.len()];
        for b in 0..n {
            let s = b * c * hw..(b + 1) * c * hw;
            gemm(
                c,
                c,
                hw,
                1.0,
                MatRef::transposed(self.weight.data(), c),
                MatRef::rows(&grad_out[s.clone()], hw),
                0.0,
                &mut grad_in[s.clone()],
            );
            gemm(
                c,
                hw,
                c,
                1.0,
                MatRef::rows(&grad_out[s.clone()], hw),
                MatRef::transposed(&input.data()[s], hw),
                1.0,
                &mut grads[0],
            );
        }
        if logdet_weight != 0.0 {
            // d log|det W| / dW = W^{-T}
            let inv = self.factor()?.inverse();
            let k = logdet_weight * (n * hw) as f64;
            for i in 0..c {
                for j in 0..c {
                    grads[0][i * c + j] += k * inv[j * c + i];
                }
            }
        }
        Ok(grad_in)
    }

    /// Gradient of `x = W^{-1} y`, given the recovered `x`.
    pub(crate) fn backward_inverse(
        &self,
        recovered: &Tensor,
        grad_out: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Result<Vec<f64>> {
        let [n, c, h, w] = recovered.dims();
        let hw = h * w;
        let inv = self.factor()?.inverse();
        let mut grad_in = vec![0.0; recovered.len()];
        for b in 0..n {
            let s = b * c * hw..(b + 1) * c * hw;
            // dy = W^{-T} dx
            gemm(
                c,
                c,
                hw,
                1.0,
                MatRef::transposed(&inv, c),
                MatRef::rows(&grad_out[s.clone()], hw),
                0.0,
                &mut grad_in[s.clone()],
            );
            // dW = -dy x^T
            gemm(
                c,
                hw,
                c,
                -1.0,
                MatRef::rows(&grad_in[s.clone()], hw),
                MatRef::transposed(&recovered.data()[s], hw),
                1.0,
                &mut grads[0],
            );
        }
        Ok(grad_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_swap() {
        let x = Tensor::randn([1, 2, 2, 2], &mut Rng::new(1)).unwrap();
        let (y, ld) = InvConv::identity(2).forward(&x).unwrap();
        assert_eq!((y, ld), (x.clone(), 0.0));
        let swap = InvConv::from_matrix(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (y, ld) = swap.forward(&x).unwrap();
        assert_eq!(ld, 0.0);
        assert_eq!(&y.data()[..4], &x.data()[4..]);
        assert_eq!(&y.data()[4..], &x.data()[..4]);
        let two = InvConv::from_matrix(2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!((two.forward(&x).unwrap().1 - 4.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_round_trip() {
        let mut rng = Rng::new(2);
        let layer = InvConv::new(4, &mut rng);
        let x = Tensor::randn([2, 4, 3, 3], &mut rng).unwrap();
        let (y, ld) = layer.forward(&x).unwrap();
        assert!(ld.abs() < 1e-10);
        assert!(layer.inverse(&y).unwrap().max_rel_diff(&x).unwrap() <= 1e-12);
        assert_eq!(
            InvConv::identity(3)
                .inverse(&Tensor::zeros([1, 3, 1, 1]).unwrap())
                .unwrap()
                .data(),
            &[0.0; 3]
        );
    }

    #[test]
    fn singular_rejected() {
        assert!(matches!(
            InvConv::from_matrix(2, vec![1.0, 2.0, 1.0, 2.0]),
            Err(FdnError::Singular(_))
        ));
    }
}
