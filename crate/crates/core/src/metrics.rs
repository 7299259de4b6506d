//! Image quality metrics.

use crate::error::{FdnError, Result};
use crate::tensor::Tensor;

/// MSE below this is reported as an infinite PSNR.
pub const PSNR_MSE_FLOOR: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(FdnError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)` in dB, `+inf` when the images (nearly) coincide.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(FdnError::pre("PSNR peak must be positive"));
    }
    let m = mse(a, b)?;
    if m < PSNR_MSE_FLOOR {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1-D Gaussian; the 2-D SSIM window is its outer product.
pub fn gaussian_window_1d() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|k| g[k] * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean structural similarity for images in `[0, 1]`: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, valid window positions only, computed
/// per channel and batch entry and then averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(FdnError::ShapeMismatch(a.dims(), b.dims()));
    }
    let [_, _, h, w] = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FdnError::pre(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window_1d();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let hw = h * w;
    let mut total = 0.0;
    let mut planes = 0usize;
    for (pa, pb) in a.data().chunks_exact(hw).zip(b.data().chunks_exact(hw)) {
        let xx: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = pa.iter().zip(pb).map(|(p, q)| p * q).collect();
        let mx = filter_valid(pa, h, w, &g);
        let my = filter_valid(pb, h, w, &g);
        let exx = filter_valid(&xx, h, w, &g);
        let eyy = filter_valid(&yy, h, w, &g);
        let exy = filter_valid(&xy, h, w, &g);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            sum += ssim_at(mx[i], my[i], exx[i], eyy[i], exy[i], c1, c2);
        }
        total += sum / mx.len() as f64;
        planes += 1;
    }
    Ok(total / planes as f64)
}

pub(crate) fn ssim_at(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64, c1: f64, c2: f64) -> f64 {
    let vx = exx - mx * mx;
    let vy = eyy - my * my;
    let cov = exy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn image(seed: u64, dims: [usize; 4]) -> Tensor {
        Tensor::randn(dims, &mut Rng::new(seed))
            .unwrap()
            .map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
            .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = image(1, [1, 1, 8, 8]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 10.0 / 255.0).unwrap();
        let expected = 20.0 * (255.0f64 / 10.0).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 28.13).abs() < 0.005);
        let c = image(2, [1, 1, 8, 8]);
        assert_eq!(psnr(&a, &c, 1.0).unwrap(), psnr(&c, &a, 1.0).unwrap());
        assert!(psnr(&a, &image(3, [1, 1, 8, 4]), 1.0).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = image(4, [2, 3, 16, 16]);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_is_lower() {
        let a = image(5, [1, 1, 16, 16]);
        let inv = a.map(|v| 1.0 - v).unwrap();
        let s = ssim(&a, &inv).unwrap();
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = image(6, [1, 1, 10, 16]);
        assert!(ssim(&a, &a).is_err());
    }

    /// Direct 2-D window, one window position at a time.
    fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
        let [n, c, h, w] = a.dims();
        let r = (SSIM_WINDOW / 2) as f64;
        let mut win = vec![vec![0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut s = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - r, j as f64 - r);
                *v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                s += *v;
            }
        }
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let c2 = (SSIM_K2 * 1.0f64).powi(2);
        let mut total = 0.0;
        for bn in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                let mut count = 0;
                for y in 0..=h - SSIM_WINDOW {
                    for x in 0..=w - SSIM_WINDOW {
                        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for i in 0..SSIM_WINDOW {
                            for j in 0..SSIM_WINDOW {
                                let wt = win[i][j] / s;
                                let p = a.at(bn, ch, y + i, x + j);
                                let q = b.at(bn, ch, y + i, x + j);
                                mx += wt * p;
                                my += wt * q;
                                sxx += wt * p * p;
                                syy += wt * q * q;
                                sxy += wt * p * q;
                            }
                        }
                        let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                        acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        count += 1;
                    }
                }
                total += acc / count as f64;
            }
        }
        total / (n * c) as f64
    }

    #[test]
    fn ssim_matches_naive_double_loop() {
        let a = image(7, [2, 2, 14, 17]);
        let b = image(8, [2, 2, 14, 17]);
        let mixed = a.map(|v| v * 0.7).unwrap();
        for other in [&b, &mixed] {
            let fast = ssim(&a, other).unwrap();
            let slow = naive_ssim(&a, other);
            assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
        }
    }
}
