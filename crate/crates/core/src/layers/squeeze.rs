//! Space-to-depth squeeze.
//!
//! Output channel `4c + k` at `(i, j)` reads input channel `c` at
//! `(2i + dy_k, 2j + dx_k)` with `(dy, dx)` = (0,0), (0,1), (1,0), (1,1) for
//! k = 0..3. The mapping is a fixed permutation and is part of the
//! checkpoint contract.

use crate::error::{FdnError, Result};
use crate::tensor::Tensor;

const OFFSETS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Permutes `src` (dims `n, c, h, w`) into squeezed layout, or back when `inverse`.
fn permute(src: &[f64], dst: &mut [f64], n: usize, c: usize, h: usize, w: usize, inverse: bool) {
    let (h2, w2) = (h / 2, w / 2);
    for b in 0..n {
        for ch in 0..c {
            for (k, &(dy, dx)) in OFFSETS.iter().enumerate() {
                let oc = 4 * ch + k;
                for i in 0..h2 {
                    for j in 0..w2 {
                        let big = ((b * c + ch) * h + 2 * i + dy) * w + 2 * j + dx;
                        let small = ((b * 4 * c + oc) * h2 + i) * w2 + j;
                        if inverse {
                            dst[big] = src[small];
                        } else {
                            dst[small] = src[big];
                        }
                    }
                }
            }
        }
    }
}

pub fn squeeze_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(FdnError::pre(format!(
            "squeeze needs even spatial dims, got {h}x{w}"
        )));
    }
    let mut out = vec![0.0; x.len()];
    permute(x.data(), &mut out, n, c, h, w, false);
    Tensor::from_parts([n, 4 * c, h / 2, w / 2], out, "squeeze")
}

pub fn squeeze_inverse(x: &Tensor) -> Result<Tensor> {
    let [n, c4, h2, w2] = x.dims();
    if c4 % 4 != 0 {
        return Err(FdnError::pre(format!(
            "unsqueeze needs channels divisible by 4, got {c4}"
        )));
    }
    let mut out = vec![0.0; x.len()];
    permute(x.data(), &mut out, n, c4 / 4, 2 * h2, 2 * w2, true);
    Tensor::from_parts([n, c4 / 4, 2 * h2, 2 * w2], out, "unsqueeze")
}

/// Gradient through the squeeze: the transpose of a permutation is its inverse.
pub(crate) fn squeeze_backward(grad_out: &[f64], in_dims: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = in_dims;
    let mut g = vec![0.0; grad_out.len()];
    permute(grad_out, &mut g, n, c, h, w, true);
    g
}

/// Gradient through the unsqueeze, given the unsqueeze's input dims.
pub(crate) fn unsqueeze_backward(grad_out: &[f64], in_dims: [usize; 4]) -> Vec<f64> {
    let [n, c4, h2, w2] = in_dims;
    let mut g = vec![0.0; grad_out.len()];
    permute(grad_out, &mut g, n, c4 / 4, 2 * h2, 2 * w2, false);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn two_by_two_block() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = squeeze_forward(&x).unwrap();
        assert_eq!(s.dims(), [1, 4, 1, 1]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(squeeze_inverse(&s).unwrap(), x);
    }

    #[test]
    fn channel_major_grouping() {
        // second input channel lands in output channels 4..8
        let x = Tensor::from_vec([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let s = squeeze_forward(&x).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let x = Tensor::from_vec([1, 1, 2, 4], (0..8).map(f64::from).collect()).unwrap();
        let s = squeeze_forward(&x).unwrap();
        // channel k holds offsets (dy,dx); columns j=0,1
        assert_eq!(s.data(), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
    }

    #[test]
    fn round_trips() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn([1, 3, 4, 4], &mut rng).unwrap();
        assert_eq!(squeeze_inverse(&squeeze_forward(&x).unwrap()).unwrap(), x);
        let z = Tensor::randn([2, 8, 2, 2], &mut rng).unwrap();
        assert_eq!(squeeze_forward(&squeeze_inverse(&z).unwrap()).unwrap(), z);
    }

    #[test]
    fn precondition_errors() {
        assert!(squeeze_forward(&Tensor::zeros([1, 1, 3, 4]).unwrap()).is_err());
        assert!(squeeze_inverse(&Tensor::zeros([1, 6, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn backward_is_inverse_permutation() {
        let mut rng = Rng::new(8);
        let g = Tensor::randn([1, 8, 2, 2], &mut rng).unwrap();
        let back = squeeze_backward(g.data(), [1, 2, 4, 4]);
        assert_eq!(back, squeeze_inverse(&g).unwrap().into_vec());
    }
}
