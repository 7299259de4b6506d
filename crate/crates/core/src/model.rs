//! The full flow: a stack of downscale blocks, each a squeeze followed by
//! `n_sof` steps of (actnorm, 1x1 conv, affine coupling).

use crate::error::{FdnError, Result};
use crate::layers::actnorm::Actnorm;
use crate::layers::coupling::{Coupling, CouplingCache};
use crate::layers::dense::DenseSubnet;
use crate::layers::invconv::InvConv;
use crate::layers::squeeze::{
    squeeze_backward, squeeze_forward, squeeze_inverse, unsqueeze_backward,
};
use crate::linalg::random_orthogonal;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameter tensors per step of flow: actnorm scale and shift, the 1x1
/// weight, then 8 tensors for each of the three coupling subnets.
pub const PARAMS_PER_STEP: usize = 3 + 3 * 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_flow_blocks: usize,
    pub n_sof: usize,
    pub dense_width: usize,
    pub clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            height: 64,
            width: 64,
            n_flow_blocks: 2,
            n_sof: 8,
            dense_width: 32,
            clamp: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let m = 1usize << self.n_flow_blocks.min(30);
        if self.n_flow_blocks == 0 || self.n_flow_blocks > 8 {
            return Err(FdnError::Config("n_flow_blocks must be in 1..=8".into()));
        }
        if self.in_channels == 0 || self.dense_width == 0 {
            return Err(FdnError::Config(
                "channels and dense width must be positive".into(),
            ));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(m)
            || !self.width.is_multiple_of(m)
        {
            return Err(FdnError::Config(format!(
                "input {}x{} must be a positive multiple of {m}",
                self.height, self.width
            )));
        }
        if !(self.clamp.is_finite() && self.clamp > 0.0) {
            return Err(FdnError::Config("clamp must be positive".into()));
        }
        Ok(())
    }

    /// Spatial multiple required of image dims.
    pub fn required_multiple(&self) -> usize {
        1 << self.n_flow_blocks
    }

    /// Channels at the latent resolution.
    pub fn latent_channels(&self) -> usize {
        self.in_channels * 4usize.pow(self.n_flow_blocks as u32)
    }

    pub fn with_size(&self, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            height,
            width,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: Actnorm,
    pub invconv: InvConv,
    pub coupling: Coupling,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    config: ModelConfig,
    /// `blocks[b][s]`; a squeeze precedes each block.
    blocks: Vec<Vec<FlowStep>>,
}

/// Per-sample gradients are summed over the batch; the layout follows
/// [`FlowModel::param_paths`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &FlowModel) -> Self {
        Gradients(model.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }
}

enum Record {
    Squeeze([usize; 4]),
    Actnorm(Tensor),
    InvConv(Tensor),
    Coupling(CouplingCache),
}

/// Activations kept by [`FlowModel::forward_cached`] for backpropagation.
pub struct ForwardTape {
    records: Vec<Record>,
    batch: usize,
}

/// Activations kept by [`FlowModel::inverse_cached`] for backpropagation.
pub struct InverseTape {
    records: Vec<Record>,
}

impl FlowModel {
    /// Fresh model: orthogonal 1x1 weights, zero-output couplings and
    /// actnorm layers awaiting data-dependent initialization.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.n_flow_blocks);
        let mut c = config.in_channels;
        for _ in 0..config.n_flow_blocks {
            c *= 4;
            let steps = (0..config.n_sof)
                .map(|_| FlowStep {
                    actnorm: Actnorm::new(c),
                    invconv: InvConv::new(c, rng),
                    coupling: Coupling::new(c, config.dense_width, config.clamp, rng),
                })
                .collect();
            blocks.push(steps);
        }
        Ok(FlowModel { config, blocks })
    }

    /// Model acting as the pure squeeze permutation: unit actnorm (marked
    /// initialized), identity 1x1 weights, zero-output couplings.
    pub fn identity(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut model = FlowModel::new(config, rng)?;
        for step in model.steps_mut() {
            let c = step.actnorm.channels();
            step.actnorm.initialized = true;
            step.invconv = InvConv::identity(c);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Vec<FlowStep>] {
        &self.blocks
    }

    pub fn steps(&self) -> impl Iterator<Item = &FlowStep> {
        self.blocks.iter().flatten()
    }

    pub fn steps_mut(&mut self) -> impl Iterator<Item = &mut FlowStep> {
        self.blocks.iter_mut().flatten()
    }

    pub fn is_initialized(&self) -> bool {
        self.steps().all(|s| s.actnorm.initialized)
    }

    pub fn latent_dims(&self, n: usize) -> [usize; 4] {
        let f = self.config.required_multiple();
        [
            n,
            self.config.latent_channels(),
            self.config.height / f,
            self.config.width / f,
        ]
    }

    /// Canonical parameter paths, e.g. `block0.sof3.actnorm.s1`.
    pub fn param_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (b, steps) in self.blocks.iter().enumerate() {
            for s in 0..steps.len() {
                let p = format!("block{b}.sof{s}");
                out.push(format!("{p}.actnorm.s1"));
                out.push(format!("{p}.actnorm.b1"));
                out.push(format!("{p}.invconv.w"));
                for g in ["g1", "g2", "g3"] {
                    for name in DenseSubnet::param_names() {
                        out.push(format!("{p}.coupling.{g}.{name}"));
                    }
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for step in self.steps() {
            out.push(&step.actnorm.scale);
            out.push(&step.actnorm.shift);
            out.push(&step.invconv.weight);
            for net in step.coupling.subnets() {
                out.extend(net.params());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for step in self.steps_mut() {
            out.push(&mut step.actnorm.scale);
            out.push(&mut step.actnorm.shift);
            out.push(&mut step.invconv.weight);
            for net in step.coupling.subnets_mut() {
                out.extend(net.params_mut().iter_mut());
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Fails if any actnorm scale or 1x1 determinant is below the
    /// singularity floor.
    pub fn check_invertible(&self) -> Result<()> {
        for step in self.steps() {
            step.actnorm.check_scale()?;
            step.invconv.factor()?;
        }
        Ok(())
    }

    fn check_input(&self, y: &Tensor) -> Result<()> {
        let c = &self.config;
        let [_, ch, h, w] = y.dims();
        if ch != c.in_channels || h % c.required_multiple() != 0 || w % c.required_multiple() != 0 {
            return Err(FdnError::pre(format!(
                "model input must have {} channels and spatial dims divisible by {}, got {:?}",
                c.in_channels,
                c.required_multiple(),
                y.dims()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.c() != self.config.latent_channels() {
            return Err(FdnError::pre(format!(
                "latent must have {} channels, got {}",
                self.config.latent_channels(),
                z.c()
            )));
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization, layer by layer in network
    /// order. Layers that are already initialized are left alone.
    pub fn initialize_actnorm(&mut self, batch: &Tensor) -> Result<()> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for steps in &mut self.blocks {
            h = squeeze_forward(&h)?;
            for step in steps.iter_mut() {
                if !step.actnorm.initialized {
                    step.actnorm.initialize(&h)?;
                }
                h = step.actnorm.forward(&h)?.0;
                h = step.invconv.forward(&h)?.0;
                h = step.coupling.forward(&h)?.0;
            }
        }
        Ok(())
    }

    /// `z = f(y)` and the per-sample log-determinant.
    pub fn forward(&self, y: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (z, per_layer) = self.forward_layers(y)?;
        Ok((z, sum_layers(&per_layer, y.n())))
    }

    /// Forward pass also returning each layer's per-sample log-determinant
    /// contribution, in network order (squeezes included, as zeros).
    pub fn forward_layers(&self, y: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        self.check_input(y)?;
        let n = y.n();
        let mut per_layer = Vec::new();
        let mut h = y.clone();
        for steps in &self.blocks {
            h = squeeze_forward(&h)?;
            per_layer.push(vec![0.0; n]);
            for step in steps {
                let (o, ld) = step.actnorm.forward(&h)?;
                per_layer.push(vec![ld; n]);
                let (o, ld) = step.invconv.forward(&o)?;
                per_layer.push(vec![ld; n]);
                let (o, ld) = step.coupling.forward(&o)?;
                per_layer.push(ld);
                h = o;
            }
        }
        Ok((h, per_layer))
    }

    /// `y = f^{-1}(z)`, layer inverses in reverse order.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let mut h = z.clone();
        for steps in self.blocks.iter().rev() {
            for step in steps.iter().rev() {
                h = step.coupling.inverse(&h)?;
                h = step.invconv.inverse(&h)?;
                h = step.actnorm.inverse(&h)?;
            }
            h = squeeze_inverse(&h)?;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, y: &Tensor) -> Result<(Tensor, Vec<f64>, ForwardTape)> {
        self.check_input(y)?;
        let n = y.n();
        let mut records = Vec::with_capacity(self.blocks.len() * (1 + 3 * self.config.n_sof));
        let mut per_layer = Vec::new();
        let mut h = y.clone();
        for steps in &self.blocks {
            records.push(Record::Squeeze(h.dims()));
            h = squeeze_forward(&h)?;
            per_layer.push(vec![0.0; n]);
            for step in steps {
                let (o, ld) = step.actnorm.forward(&h)?;
                per_layer.push(vec![ld; n]);
                records.push(Record::Actnorm(h));
                let (o2, ld) = step.invconv.forward(&o)?;
                per_layer.push(vec![ld; n]);
                records.push(Record::InvConv(o));
                let (o3, ld, cache) = step.coupling.forward_cached(&o2)?;
                per_layer.push(ld);
                records.push(Record::Coupling(cache));
                h = o3;
            }
        }
        Ok((
            h,
            sum_layers(&per_layer, n),
            ForwardTape { records, batch: n },
        ))
    }

    pub fn inverse_cached(&self, z: &Tensor) -> Result<(Tensor, InverseTape)> {
        self.check_latent(z)?;
        let mut records = Vec::new();
        let mut h = z.clone();
        for steps in self.blocks.iter().rev() {
            for step in steps.iter().rev() {
                let (o, cache) = step.coupling.inverse_cached(&h)?;
                records.push(Record::Coupling(cache));
                let o = step.invconv.inverse(&o)?;
                records.push(Record::InvConv(o.clone()));
                let o = step.actnorm.inverse(&o)?;
                records.push(Record::Actnorm(o.clone()));
                h = o;
            }
            records.push(Record::Squeeze(h.dims()));
            h = squeeze_inverse(&h)?;
        }
        Ok((h, InverseTape { records }))
    }

    /// Reverse-mode gradients of `<grad_z, z> + logdet_weight * sum_n logdet_n`
    /// for a recorded forward pass. Parameter gradients are added to `grads`;
    /// the input gradient is returned.
    pub fn backward_forward(
        &self,
        tape: &ForwardTape,
        grad_z: &[f64],
        logdet_weight: f64,
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        let mut g = grad_z.to_vec();
        let mut rec = tape.records.iter().rev();
        let mut offset = grads.0.len();
        for steps in self.blocks.iter().rev() {
            for step in steps.iter().rev() {
                offset -= PARAMS_PER_STEP;
                let slot = &mut grads.0[offset..offset + PARAMS_PER_STEP];
                match rec.next() {
                    Some(Record::Coupling(c)) => {
                        g = step
                            .coupling
                            .backward_forward(c, &g, logdet_weight, &mut slot[3..])
                    }
                    _ => unreachable!("tape out of sync"),
                }
                match rec.next() {
                    Some(Record::InvConv(x)) => {
                        g = step
                            .invconv
                            .backward_forward(x, &g, logdet_weight, &mut slot[2..3])?
                    }
                    _ => unreachable!("tape out of sync"),
                }
                match rec.next() {
                    Some(Record::Actnorm(x)) => {
                        g = step
                            .actnorm
                            .backward_forward(x, &g, logdet_weight, &mut slot[0..2])
                    }
                    _ => unreachable!("tape out of sync"),
                }
            }
            match rec.next() {
                Some(Record::Squeeze(dims)) => g = squeeze_backward(&g, *dims),
                _ => unreachable!("tape out of sync"),
            }
        }
        debug_assert_eq!(g.len() % tape.batch, 0);
        Ok(g)
    }

    /// Reverse-mode gradients of `<grad_y, f^{-1}(z)>` for a recorded inverse
    /// pass; returns the gradient w.r.t. `z`.
    pub fn backward_inverse(
        &self,
        tape: &InverseTape,
        grad_y: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        let mut g = grad_y.to_vec();
        let mut rec = tape.records.iter().rev();
        let mut offset = 0;
        for steps in &self.blocks {
            match rec.next() {
                Some(Record::Squeeze(dims)) => g = unsqueeze_backward(&g, *dims),
                _ => unreachable!("tape out of sync"),
            }
            for step in steps {
                let slot = &mut grads.0[offset..offset + PARAMS_PER_STEP];
                offset += PARAMS_PER_STEP;
                match rec.next() {
                    Some(Record::Actnorm(x)) => {
                        g = step.actnorm.backward_inverse(x, &g, &mut slot[0..2])
                    }
                    _ => unreachable!("tape out of sync"),
                }
                match rec.next() {
                    Some(Record::InvConv(x)) => {
                        g = step.invconv.backward_inverse(x, &g, &mut slot[2..3])?
                    }
                    _ => unreachable!("tape out of sync"),
                }
                match rec.next() {
                    Some(Record::Coupling(c)) => {
                        g = step.coupling.backward_inverse(c, &g, &mut slot[3..])
                    }
                    _ => unreachable!("tape out of sync"),
                }
            }
        }
        Ok(g)
    }

    /// Gradients of `<grad_z, z> + w * logdet` in one call.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        grad_z: &Tensor,
        logdet_weight: f64,
    ) -> Result<(Tensor, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let gy = self.backward_forward(tape, grad_z.data(), logdet_weight, &mut grads)?;
        let f = self.config.required_multiple();
        let [_, lc, lh, lw] = grad_z.dims();
        let in_dims = [tape.batch, lc / (f * f), lh * f, lw * f];
        Ok((Tensor::from_parts(in_dims, gy, "model backward")?, grads))
    }

    /// Overwrites every parameter with random values of moderate size:
    /// actnorm scales in `exp([-s, s])`, perturbed orthogonal 1x1 weights and
    /// nonzero coupling outputs. Used by the verification suites.
    pub fn randomize(&mut self, rng: &mut Rng, strength: f64) {
        for step in self.steps_mut() {
            let c = step.actnorm.channels();
            let scale: Vec<f64> = (0..c)
                .map(|_| rng.uniform_range(-strength, strength).exp())
                .collect();
            let shift: Vec<f64> = (0..c).map(|_| strength * rng.normal()).collect();
            step.actnorm = Actnorm::with_params(scale, shift).expect("positive scales");
            let mut w = random_orthogonal(c, rng);
            for v in w.iter_mut() {
                *v += 0.2 * strength * rng.normal() / (c as f64).sqrt();
            }
            step.invconv = match InvConv::from_matrix(c, w) {
                Ok(layer) => layer,
                Err(_) => InvConv::new(c, rng),
            };
            for net in step.coupling.subnets_mut() {
                for p in net.params_mut() {
                    let fan_in = (p.len() / p.n()).max(1);
                    let std = strength / (fan_in as f64).sqrt();
                    p.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = std * rng.normal());
                }
            }
        }
    }
}

fn sum_layers(per_layer: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut total = vec![0.0; n];
    for layer in per_layer {
        for (t, v) in total.iter_mut().zip(layer) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
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

    #[test]
    fn identity_model_is_squeeze() {
        let mut rng = Rng::new(0);
        let model = FlowModel::identity(tiny(), &mut rng).unwrap();
        let y = Tensor::randn([2, 1, 4, 4], &mut rng).unwrap();
        let (z, ld) = model.forward(&y).unwrap();
        assert_eq!(z, squeeze_forward(&y).unwrap());
        assert_eq!(ld, vec![0.0, 0.0]);
        assert_eq!(model.inverse(&z).unwrap(), y);
    }

    #[test]
    fn param_paths_align() {
        let model = FlowModel::new(tiny(), &mut Rng::new(0)).unwrap();
        let paths = model.param_paths();
        assert_eq!(paths.len(), model.params().len());
        assert_eq!(paths[0], "block0.sof0.actnorm.s1");
        assert_eq!(paths[2], "block0.sof0.invconv.w");
        assert_eq!(paths[3], "block0.sof0.coupling.g1.w0");
        assert_eq!(paths.last().unwrap(), "block0.sof0.coupling.g3.bout");
    }

    #[test]
    fn uninitialized_model_refuses_forward() {
        let model = FlowModel::new(tiny(), &mut Rng::new(0)).unwrap();
        let y = Tensor::zeros([1, 1, 4, 4]).unwrap();
        assert!(matches!(model.forward(&y), Err(FdnError::Uninitialized(_))));
    }

    #[test]
    fn wrong_shapes_rejected() {
        let mut rng = Rng::new(0);
        let model = FlowModel::identity(tiny(), &mut rng).unwrap();
        assert!(model
            .forward(&Tensor::zeros([1, 2, 4, 4]).unwrap())
            .is_err());
        assert!(model
            .forward(&Tensor::zeros([1, 1, 3, 4]).unwrap())
            .is_err());
        assert!(model
            .inverse(&Tensor::zeros([1, 3, 2, 2]).unwrap())
            .is_err());
    }
}
