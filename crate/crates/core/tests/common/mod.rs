#![allow(dead_code)]

use fdn_core::{FlowModel, ModelConfig, Rng, Tensor};

/// Central-difference Jacobian of `f` at `x`; `jac[i][j] = d out_i / d in_j`.
pub fn numerical_jacobian(x: &Tensor, step: f64, f: impl Fn(&Tensor) -> Tensor) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[j] += step;
        minus[j] -= step;
        let fp = f(&Tensor::from_vec(x.dims(), plus).unwrap());
        let fm = f(&Tensor::from_vec(x.dims(), minus).unwrap());
        cols.push(
            fp.data()
                .iter()
                .zip(fm.data())
                .map(|(a, b)| (a - b) / (2.0 * step))
                .collect::<Vec<f64>>(),
        );
    }
    (0..cols[0].len())
        .map(|i| cols.iter().map(|c| c[i]).collect())
        .collect()
}

/// `log|det A|` by Gaussian elimination with partial pivoting, written
/// independently of the library's LU.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .unwrap();
        a.swap(k, p);
        let pivot = a[k][k];
        acc += pivot.abs().ln();
        for i in k + 1..n {
            let f = a[i][k] / pivot;
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    acc
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        height: 4,
        width: 4,
        n_flow_blocks: 1,
        n_sof: 1,
        dense_width: 4,
        clamp: 2.0,
    }
}

pub fn random_model(config: ModelConfig, seed: u64, strength: f64) -> FlowModel {
    let mut rng = Rng::new(seed);
    let mut model = FlowModel::new(config, &mut rng).unwrap();
    model.randomize(&mut rng, strength);
    model
}

/// `|a - b| / max(|a|, |b|)`, or absolute error for near-zero values.
pub fn grad_error(analytic: f64, numeric: f64) -> (f64, bool) {
    if analytic.abs() < 1e-8 && numeric.abs() < 1e-8 {
        let e = (analytic - numeric).abs();
        (e, e <= 1e-6)
    } else {
        let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        (e, e <= 1e-4)
    }
}
