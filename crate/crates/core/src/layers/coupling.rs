//! Affine coupling layer.
//!
//! Forward, with `(a, b)` the first and second channel halves:
//!
//! ```text
//! a' = a + g1(b)
//! b' = g2(a') * b + g3(a')
//! ```
//!
//! and the inverse recovers `b` first, then `a`. `g2 = exp(C tanh(r / C))`
//! where `r` is the raw output of the second subnet, so the scale is always
//! in `(e^-C, e^C)` and the division in the inverse is safe.

use crate::error::{FdnError, Result};
use crate::layers::dense::{DenseCache, DenseSubnet};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Coupling {
    pub shift_a: DenseSubnet,
    pub scale: DenseSubnet,
    pub shift_b: DenseSubnet,
    pub clamp: f64,
}

#[derive(Clone, Debug)]
pub struct CouplingCache {
    dims: [usize; 4],
    /// The untouched-by-scale half `b` (forward input or inverse output).
    b: Vec<f64>,
    /// Soft-clamped log-scale.
    log_scale: Vec<f64>,
    g1: DenseCache,
    g2: DenseCache,
    g3: DenseCache,
}

pub(crate) fn split(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let half = x.sample_len() / 2;
    let mut a = Vec::with_capacity(x.len() / 2);
    let mut b = Vec::with_capacity(x.len() / 2);
    for s in x.data().chunks_exact(2 * half) {
        a.extend_from_slice(&s[..half]);
        b.extend_from_slice(&s[half..]);
    }
    (a, b)
}

pub(crate) fn concat(a: &[f64], b: &[f64], half: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * 2);
    for (ca, cb) in a.chunks_exact(half).zip(b.chunks_exact(half)) {
        out.extend_from_slice(ca);
        out.extend_from_slice(cb);
    }
    out
}

impl Coupling {
    pub fn new(channels: usize, width: usize, clamp: f64, rng: &mut Rng) -> Self {
        assert!(
            channels.is_multiple_of(2),
            "coupling needs an even channel count"
        );
        let half = channels / 2;
        Coupling {
            shift_a: DenseSubnet::new(half, half, width, rng),
            scale: DenseSubnet::new(half, half, width, rng),
            shift_b: DenseSubnet::new(half, half, width, rng),
            clamp,
        }
    }

    pub fn channels(&self) -> usize {
        2 * self.shift_a.cin()
    }

    pub fn subnets(&self) -> [&DenseSubnet; 3] {
        [&self.shift_a, &self.scale, &self.shift_b]
    }

    pub fn subnets_mut(&mut self) -> [&mut DenseSubnet; 3] {
        [&mut self.shift_a, &mut self.scale, &mut self.shift_b]
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if !x.c().is_multiple_of(2) {
            return Err(FdnError::pre(format!(
                "coupling needs even channels, got {}",
                x.c()
            )));
        }
        if x.c() != self.channels() {
            return Err(FdnError::pre(format!(
                "coupling expects {} channels, got {}",
                self.channels(),
                x.c()
            )));
        }
        Ok(())
    }

    fn soft_clamp(&self, raw: f64) -> f64 {
        self.clamp * (raw / self.clamp).tanh()
    }

    fn soft_clamp_grad(&self, log_scale: f64) -> f64 {
        let t = log_scale / self.clamp;
        1.0 - t * t
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (out, logdet, _) = self.forward_impl(x, false)?;
        Ok((out, logdet))
    }

    pub(crate) fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>, CouplingCache)> {
        let (out, logdet, cache) = self.forward_impl(x, true)?;
        Ok((out, logdet, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        x: &Tensor,
        keep: bool,
    ) -> Result<(Tensor, Vec<f64>, Option<CouplingCache>)> {
        self.check(x)?;
        let [n, c, h, w] = x.dims();
        let half = c / 2 * h * w;
        let (a, b) = split(x);
        let (g1, c1) = self.shift_a.forward(&b, n, h, w, keep);
        let a1: Vec<f64> = a.iter().zip(&g1).map(|(p, q)| p + q).collect();
        let (raw, c2) = self.scale.forward(&a1, n, h, w, keep);
        let (t, c3) = self.shift_b.forward(&a1, n, h, w, keep);
        let log_scale: Vec<f64> = raw.iter().map(|&r| self.soft_clamp(r)).collect();
        let b1: Vec<f64> = b
            .iter()
            .zip(&log_scale)
            .zip(&t)
            .map(|((v, ls), t)| ls.exp() * v + t)
            .collect();
        let logdet = log_scale
            .chunks_exact(half)
            .map(|s| s.iter().sum())
            .collect();
        let out = Tensor::from_parts(x.dims(), concat(&a1, &b1, half), "coupling forward")?;
        let cache = keep.then(|| CouplingCache {
            dims: x.dims(),
            b,
            log_scale,
            g1: c1.unwrap(),
            g2: c2.unwrap(),
            g3: c3.unwrap(),
        });
        Ok((out, logdet, cache))
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.inverse_impl(y, false)?.0)
    }

    pub(crate) fn inverse_cached(&self, y: &Tensor) -> Result<(Tensor, CouplingCache)> {
        let (out, cache) = self.inverse_impl(y, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn inverse_impl(&self, y: &Tensor, keep: bool) -> Result<(Tensor, Option<CouplingCache>)> {
        self.check(y)?;
        let [n, c, h, w] = y.dims();
        let half = c / 2 * h * w;
        let (a1, b1) = split(y);
        let (raw, c2) = self.scale.forward(&a1, n, h, w, keep);
        let (t, c3) = self.shift_b.forward(&a1, n, h, w, keep);
        let log_scale: Vec<f64> = raw.iter().map(|&r| self.soft_clamp(r)).collect();
        let b: Vec<f64> = b1
            .iter()
            .zip(&t)
            .zip(&log_scale)
            .map(|((v, t), ls)| (v - t) * (-ls).exp())
            .collect();
        let (g1, c1) = self.shift_a.forward(&b, n, h, w, keep);
        let a: Vec<f64> = a1.iter().zip(&g1).map(|(p, q)| p - q).collect();
        let out = Tensor::from_parts(y.dims(), concat(&a, &b, half), "coupling inverse")?;
        let cache = keep.then(|| CouplingCache {
            dims: y.dims(),
            b,
            log_scale,
            g1: c1.unwrap(),
            g2: c2.unwrap(),
            g3: c3.unwrap(),
        });
        Ok((out, cache))
    }

    /// `grads` holds the 24 subnet parameter gradients (shift_a, scale, shift_b).
    pub(crate) fn backward_forward(
        &self,
        cache: &CouplingCache,
        grad_out: &[f64],
        logdet_weight: f64,
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let [_, c, h, w] = cache.dims;
        let half = c / 2 * h * w;
        let (ga1, gb1) = split_slice(grad_out, half);
        let (g_first, rest) = grads.split_at_mut(8);
        let (g_scale, g_last) = rest.split_at_mut(8);

        let mut gb = Vec::with_capacity(gb1.len());
        let mut graw = Vec::with_capacity(gb1.len());
        for ((&g, &ls), &v) in gb1.iter().zip(&cache.log_scale).zip(&cache.b) {
            let s = ls.exp();
            gb.push(g * s);
            graw.push((g * v * s + logdet_weight) * self.soft_clamp_grad(ls));
        }
        let via_scale = self.scale.backward(&cache.g2, &graw, g_scale);
        let via_shift = self.shift_b.backward(&cache.g3, &gb1, g_last);
        let ga1_total: Vec<f64> = ga1
            .iter()
            .zip(&via_scale)
            .zip(&via_shift)
            .map(|((g, p), q)| g + p + q)
            .collect();
        for (acc, d) in gb
            .iter_mut()
            .zip(self.shift_a.backward(&cache.g1, &ga1_total, g_first))
        {
            *acc += d;
        }
        concat(&ga1_total, &gb, half)
    }

    /// Gradient of the inverse map; `grad_out` is w.r.t. the recovered `(a, b)`.
    pub(crate) fn backward_inverse(
        &self,
        cache: &CouplingCache,
        grad_out: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let [_, c, h, w] = cache.dims;
        let half = c / 2 * h * w;
        let (ga, gb) = split_slice(grad_out, half);
        let (g_first, rest) = grads.split_at_mut(8);
        let (g_scale, g_last) = rest.split_at_mut(8);

        // a = a1 - g1(b)
        let neg_ga: Vec<f64> = ga.iter().map(|g| -g).collect();
        let mut gb_total = gb;
        for (acc, d) in gb_total
            .iter_mut()
            .zip(self.shift_a.backward(&cache.g1, &neg_ga, g_first))
        {
            *acc += d;
        }
        // b = (b1 - t) * exp(-ls)
        let mut gb1 = Vec::with_capacity(gb_total.len());
        let mut gt = Vec::with_capacity(gb_total.len());
        let mut graw = Vec::with_capacity(gb_total.len());
        for ((&g, &ls), &v) in gb_total.iter().zip(&cache.log_scale).zip(&cache.b) {
            let inv = (-ls).exp();
            gb1.push(g * inv);
            gt.push(-g * inv);
            graw.push(-g * v * self.soft_clamp_grad(ls));
        }
        let mut ga1 = ga;
        for (acc, (p, q)) in ga1.iter_mut().zip(
            self.scale
                .backward(&cache.g2, &graw, g_scale)
                .into_iter()
                .zip(self.shift_b.backward(&cache.g3, &gt, g_last)),
        ) {
            *acc += p + q;
        }
        concat(&ga1, &gb1, half)
    }
}

fn split_slice(x: &[f64], half: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(x.len() / 2);
    let mut b = Vec::with_capacity(x.len() / 2);
    for s in x.chunks_exact(2 * half) {
        a.extend_from_slice(&s[..half]);
        b.extend_from_slice(&s[half..]);
    }
    (a, b)
}
