//! Patch sampling, augmentation and noise synthesis.

use crate::error::{FdnError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPolicy {
    /// Uniformly random top-left corner.
    Random,
    /// Center square crop, then bilinear resize to the patch size.
    CenterResize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugPolicy {
    None,
    /// Identity or horizontal mirror.
    FlipH,
    /// Identity, horizontal, vertical or both.
    FlipHV,
    /// All eight rotations and reflections of the square.
    FlipRot,
}

impl AugPolicy {
    pub fn variants(self) -> usize {
        match self {
            AugPolicy::None => 1,
            AugPolicy::FlipH => 2,
            AugPolicy::FlipHV => 4,
            AugPolicy::FlipRot => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaPolicy {
    Fixed(f64),
    /// Drawn uniformly per patch from `[lo, hi]`.
    Blind(f64, f64),
}

impl SigmaPolicy {
    fn validate(self) -> Result<Self> {
        let ok = match self {
            SigmaPolicy::Fixed(s) => s.is_finite() && s >= 0.0,
            SigmaPolicy::Blind(lo, hi) => lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi,
        };
        if ok {
            Ok(self)
        } else {
            Err(FdnError::pre(format!("invalid noise level {self:?}")))
        }
    }

    pub fn draw(self, rng: &mut Rng) -> f64 {
        match self {
            SigmaPolicy::Fixed(s) => s,
            SigmaPolicy::Blind(lo, hi) => rng.uniform_range(lo, hi),
        }
    }
}

/// `x + e` with `e ~ N(0, (sigma255 / 255)^2)` per element. Not clamped.
pub fn add_awgn(x: &Tensor, sigma255: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma255 >= 0.0) || !sigma255.is_finite() {
        return Err(FdnError::pre(format!(
            "noise level must be >= 0, got {sigma255}"
        )));
    }
    if sigma255 == 0.0 {
        return Ok(x.clone());
    }
    let std = sigma255 / 255.0;
    let mut data = vec![0.0; x.len()];
    rng.fill_normal(&mut data);
    for (v, &c) in data.iter_mut().zip(x.data()) {
        *v = c + std * *v;
    }
    Tensor::from_parts(x.dims(), data, "add_awgn")
}

fn remap(
    x: &Tensor,
    out_hw: (usize, usize),
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Tensor {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = out_hw;
    let mut data = Vec::with_capacity(x.len());
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..oh {
            for xx in 0..ow {
                let (sy, sx) = src(y, xx);
                data.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::from_parts([n, c, oh, ow], data, "remap").expect("values copied from a finite tensor")
}

/// Mirrors columns.
pub fn flip_h(x: &Tensor) -> Tensor {
    let w = x.w();
    remap(x, (x.h(), w), |y, c| (y, w - 1 - c))
}

/// Mirrors rows.
pub fn flip_v(x: &Tensor) -> Tensor {
    let h = x.h();
    remap(x, (h, x.w()), |y, c| (h - 1 - y, c))
}

/// Rotates each plane by 90 degrees counter-clockwise.
pub fn rot90(x: &Tensor) -> Tensor {
    let w = x.w();
    remap(x, (w, x.h()), |y, c| (c, w - 1 - y))
}

/// Applies augmentation variant `k` of `policy`; variant 0 is the identity.
pub fn augment(x: &Tensor, policy: AugPolicy, k: usize) -> Tensor {
    match policy {
        AugPolicy::None => x.clone(),
        AugPolicy::FlipH | AugPolicy::FlipHV => {
            let mut out = if k & 1 == 1 { flip_h(x) } else { x.clone() };
            if k & 2 == 2 {
                out = flip_v(&out);
            }
            out
        }
        AugPolicy::FlipRot => {
            let mut out = if k >= 4 { flip_h(x) } else { x.clone() };
            for _ in 0..k % 4 {
                out = rot90(&out);
            }
            out
        }
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if oh == 0 || ow == 0 {
        return Err(FdnError::pre("resize target must be non-empty"));
    }
    let axis = |o: usize, out: usize, inp: usize| {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..oh).map(|o| axis(o, oh, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| axis(o, ow, w)).collect();
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_parts([n, c, oh, ow], data, "resize")
}

/// Copies the `size x size` window at `(top, left)` of a single image.
pub fn crop(image: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let [n, c, h, w] = image.dims();
    if top + size > h || left + size > w {
        return Err(FdnError::pre(format!(
            "crop {size}x{size} at ({top}, {left}) exceeds {h}x{w} image"
        )));
    }
    let mut data = Vec::with_capacity(n * c * size * size);
    for plane in image.data().chunks_exact(h * w) {
        for y in top..top + size {
            data.extend_from_slice(&plane[y * w + left..y * w + left + size]);
        }
    }
    Tensor::from_parts([n, c, size, size], data, "crop")
}

#[derive(Clone, Debug)]
pub struct PatchDataset {
    images: Vec<Tensor>,
    patch_size: usize,
    crop: CropPolicy,
    aug: AugPolicy,
    sigma: SigmaPolicy,
}

impl PatchDataset {
    /// `images` are single `(1, c, h, w)` tensors with a common channel count.
    pub fn new(
        images: Vec<Tensor>,
        patch_size: usize,
        crop: CropPolicy,
        aug: AugPolicy,
        sigma: SigmaPolicy,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(FdnError::pre("dataset has no images"));
        }
        if patch_size == 0 {
            return Err(FdnError::pre("patch size must be positive"));
        }
        let c = images[0].c();
        for (i, im) in images.iter().enumerate() {
            if im.n() != 1 || im.c() != c {
                return Err(FdnError::pre(format!(
                    "image {i} has shape {:?}, expected (1, {c}, h, w)",
                    im.dims()
                )));
            }
            if crop == CropPolicy::Random && (im.h() < patch_size || im.w() < patch_size) {
                return Err(FdnError::pre(format!(
                    "image {i} is {}x{}, smaller than patch {patch_size}",
                    im.h(),
                    im.w()
                )));
            }
        }
        Ok(PatchDataset {
            images,
            patch_size,
            crop,
            aug,
            sigma: sigma.validate()?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images[0].c()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    fn clean_patch(&self, rng: &mut Rng) -> Result<Tensor> {
        let im = &self.images[rng.below(self.images.len())];
        let p = self.patch_size;
        let patch = match self.crop {
            CropPolicy::Random => {
                let top = rng.below(im.h() - p + 1);
                let left = rng.below(im.w() - p + 1);
                crop(im, top, left, p)?
            }
            CropPolicy::CenterResize => {
                let side = im.h().min(im.w());
                let square = crop(im, (im.h() - side) / 2, (im.w() - side) / 2, side)?;
                resize_bilinear(&square, p, p)?
            }
        };
        let k = rng.below(self.aug.variants());
        Ok(augment(&patch, self.aug, k))
    }

    /// Draws `batch` clean patches and their noisy copies.
    pub fn next_batch(&self, batch: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        if batch == 0 {
            return Err(FdnError::pre("batch must be positive"));
        }
        let mut clean = Vec::with_capacity(batch);
        let mut noisy = Vec::with_capacity(batch);
        for _ in 0..batch {
            let patch = self.clean_patch(rng)?;
            let sigma = self.sigma.draw(rng);
            noisy.push(add_awgn(&patch, sigma, rng)?);
            clean.push(patch);
        }
        Ok((Tensor::stack(&clean)?, Tensor::stack(&noisy)?))
    }
}
