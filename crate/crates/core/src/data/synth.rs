//! Procedural textured-blob images for tests, demos and smoke training.

use std::f64::consts::PI;

use crate::rng::Rng;
use crate::tensor::Tensor;

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    amp: Vec<f64>,
    fy: f64,
    fx: f64,
    phase: f64,
}

/// One `(1, channels, size, size)` image in `[0, 1]`: a shaded background
/// plus two to four soft elliptical blobs modulated by a low-frequency stripe
/// texture.
pub fn textured_blob(size: usize, channels: usize, rng: &mut Rng) -> Tensor {
    let s = size as f64;
    let base: Vec<f64> = (0..channels).map(|_| rng.uniform_range(0.3, 0.6)).collect();
    let (gy, gx) = (
        rng.uniform_range(-0.15, 0.15),
        rng.uniform_range(-0.15, 0.15),
    );
    let count = 2 + rng.below(3);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let angle = rng.uniform_range(0.0, PI);
            let sign = if rng.bernoulli_half() { 1.0 } else { -1.0 };
            let amp = sign * rng.uniform_range(0.15, 0.35);
            let freq = rng.uniform_range(1.0 / 12.0, 1.0 / 6.0);
            let dir = rng.uniform_range(0.0, 2.0 * PI);
            Blob {
                cy: rng.uniform_range(0.0, s),
                cx: rng.uniform_range(0.0, s),
                ry: rng.uniform_range(s / 8.0, s / 3.0),
                rx: rng.uniform_range(s / 8.0, s / 3.0),
                cos: angle.cos(),
                sin: angle.sin(),
                amp: (0..channels)
                    .map(|_| amp * rng.uniform_range(0.6, 1.0))
                    .collect(),
                fy: freq * dir.sin(),
                fx: freq * dir.cos(),
                phase: rng.uniform_range(0.0, 2.0 * PI),
            }
        })
        .collect();

    let mut data = vec![0.0; channels * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let shade = gy * (fy / s - 0.5) + gx * (fx / s - 0.5);
            let mut vals: Vec<f64> = base.iter().map(|b| b + shade).collect();
            for blob in &blobs {
                let (dy, dx) = (fy - blob.cy, fx - blob.cx);
                let u = (dx * blob.cos + dy * blob.sin) / blob.rx;
                let v = (dy * blob.cos - dx * blob.sin) / blob.ry;
                let weight = (-0.5 * (u * u + v * v)).exp();
                let texture =
                    1.0 + 0.3 * (2.0 * PI * (blob.fy * fy + blob.fx * fx) + blob.phase).cos();
                for (val, a) in vals.iter_mut().zip(&blob.amp) {
                    *val += a * weight * texture;
                }
            }
            for (c, v) in vals.into_iter().enumerate() {
                data[(c * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec([1, channels, size, size], data).expect("finite by construction")
}

pub fn textured_blobs(count: usize, size: usize, channels: usize, rng: &mut Rng) -> Vec<Tensor> {
    (0..count)
        .map(|_| textured_blob(size, channels, rng))
        .collect()
}
