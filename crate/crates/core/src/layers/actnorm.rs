//! Per-channel affine normalization with data-dependent initialization.

use crate::error::{FdnError, Result};
use crate::tensor::{Tensor, DIVISION_FLOOR};

#[derive(Clone, Debug)]
pub struct Actnorm {
    /// `(1, c, 1, 1)`
    pub scale: Tensor,
    /// `(1, c, 1, 1)`
    pub shift: Tensor,
    pub initialized: bool,
}

impl Actnorm {
    /// Uninitialized layer with unit scale and zero shift.
    pub fn new(channels: usize) -> Self {
        Actnorm {
            scale: Tensor::full([1, channels, 1, 1], 1.0).expect("valid dims"),
            shift: Tensor::zeros([1, channels, 1, 1]).expect("valid dims"),
            initialized: false,
        }
    }

    pub fn with_params(scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        let c = scale.len();
        let layer = Actnorm {
            scale: Tensor::from_vec([1, c, 1, 1], scale)?,
            shift: Tensor::from_vec([1, c, 1, 1], shift)?,
            initialized: true,
        };
        layer.check_scale()?;
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.scale.c()
    }

    pub fn check_scale(&self) -> Result<()> {
        match self.scale.data().iter().find(|s| s.abs() < DIVISION_FLOOR) {
            Some(&s) => Err(FdnError::DivisionFloor(s)),
            None => Ok(()),
        }
    }

    /// Sets scale and shift so `batch` maps to zero mean and unit
    /// (population) variance per channel.
    pub fn initialize(&mut self, batch: &Tensor) -> Result<()> {
        if self.initialized {
            return Err(FdnError::pre("actnorm already initialized"));
        }
        if batch.c() != self.channels() {
            return Err(FdnError::pre("actnorm channel mismatch"));
        }
        let (mean, var) = batch.channel_stats()?;
        if let Some(v) = var.iter().find(|&&v| v < DIVISION_FLOOR) {
            return Err(FdnError::pre(format!(
                "degenerate channel (variance {v:e}) at actnorm init"
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let shift: Vec<f64> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
        let c = self.channels();
        self.scale = Tensor::from_vec([1, c, 1, 1], inv_std)?;
        self.shift = Tensor::from_vec([1, c, 1, 1], shift)?;
        self.initialized = true;
        Ok(())
    }

    fn ensure_ready(&self, h: &Tensor) -> Result<()> {
        if !self.initialized {
            return Err(FdnError::Uninitialized("actnorm".into()));
        }
        if h.c() != self.channels() {
            return Err(FdnError::pre(format!(
                "actnorm expects {} channels, got {}",
                self.channels(),
                h.c()
            )));
        }
        Ok(())
    }

    /// Per-sample log-determinant, `h * w * sum_c log|s_c|`.
    pub fn logdet(&self, h: usize, w: usize) -> f64 {
        (h * w) as f64 * self.scale.data().iter().map(|s| s.abs().ln()).sum::<f64>()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        self.ensure_ready(x)?;
        let out = self.apply(x, |v, s, b| s * v + b);
        Ok((
            Tensor::from_parts(x.dims(), out, "actnorm forward")?,
            self.logdet(x.h(), x.w()),
        ))
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        self.ensure_ready(y)?;
        self.check_scale()?;
        let out = self.apply(y, |v, s, b| (v - b) / s);
        Tensor::from_parts(y.dims(), out, "actnorm inverse")
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
        let hw = x.h() * x.w();
        let (s, b) = (self.scale.data(), self.shift.data());
        x.data()
            .chunks_exact(hw)
            .enumerate()
            .flat_map(|(plane, vals)| {
                let c = plane % s.len();
                vals.iter().map(move |&v| (c, v))
            })
            .map(|(c, v)| f(v, s[c], b[c]))
            .collect()
    }

    /// Gradient of the forward map. `grads` = [scale, shift].
    pub(crate) fn backward_forward(
        &self,
        input: &Tensor,
        grad_out: &[f64],
        logdet_weight: f64,
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let [n, c, h, w] = input.dims();
        let hw = h * w;
        let s = self.scale.data();
        let mut grad_in = vec![0.0; input.len()];
        for (plane, (gi, (go, x))) in grad_in
            .chunks_exact_mut(hw)
            .zip(grad_out.chunks_exact(hw).zip(input.data().chunks_exact(hw)))
            .enumerate()
        {
            let ch = plane % c;
            let mut ds = 0.0;
            let mut db = 0.0;
            for ((g_in, &g), &v) in gi.iter_mut().zip(go).zip(x) {
                *g_in = s[ch] * g;
                ds += g * v;
                db += g;
            }
            grads[0][ch] += ds;
            grads[1][ch] += db;
        }
        for ch in 0..c {
            grads[0][ch] += logdet_weight * (n * hw) as f64 / s[ch];
        }
        grad_in
    }

    /// Gradient of the inverse map, given the inverse's output `recovered`.
    pub(crate) fn backward_inverse(
        &self,
        recovered: &Tensor,
        grad_out: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let [_, c, h, w] = recovered.dims();
        let hw = h * w;
        let s = self.scale.data();
        let mut grad_in = vec![0.0; recovered.len()];
        for (plane, (gi, (go, x))) in grad_in
            .chunks_exact_mut(hw)
            .zip(
                grad_out
                    .chunks_exact(hw)
                    .zip(recovered.data().chunks_exact(hw)),
            )
            .enumerate()
        {
            let ch = plane % c;
            let inv = 1.0 / s[ch];
            let mut ds = 0.0;
            let mut db = 0.0;
            for ((g_in, &g), &v) in gi.iter_mut().zip(go).zip(x) {
                *g_in = g * inv;
                // x = (y - b) / s  =>  dx/ds = -x / s, dx/db = -1 / s
                ds -= g * v * inv;
                db -= g * inv;
            }
            grads[0][ch] += ds;
            grads[1][ch] += db;
        }
        grad_in
    }
}
