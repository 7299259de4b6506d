//! Dense 4-D tensors of f64 in row-major `(n, c, h, w)` order.

use std::io::{Read, Write};

use crate::error::{FdnError, Result};
use crate::rng::Rng;

/// Divisors with magnitude below this are rejected by [`Tensor::elementwise`].
pub const DIVISION_FLOOR: f64 = 1e-12;

const FDT1_MAGIC: &[u8; 4] = b"FDT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    AbsSum,
}

fn checked_len(dims: [usize; 4]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(FdnError::InvalidDims(dims.to_vec(), "zero dimension"));
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FdnError::InvalidDims(dims.to_vec(), "element count overflows"))?;
    // Keep the byte size addressable too.
    if len.checked_mul(std::mem::size_of::<f64>()).is_none() || len > isize::MAX as usize / 8 {
        return Err(FdnError::InvalidDims(
            dims.to_vec(),
            "element count overflows",
        ));
    }
    Ok(len)
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        let len = checked_len(dims)?;
        Ok(Tensor {
            dims,
            data: vec![0.0; len],
        })
    }

    pub fn full(dims: [usize; 4], value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(FdnError::NonFinite("Tensor::full"));
        }
        let len = checked_len(dims)?;
        Ok(Tensor {
            dims,
            data: vec![value; len],
        })
    }

    pub fn randn(dims: [usize; 4], rng: &mut Rng) -> Result<Self> {
        let mut t = Tensor::zeros(dims)?;
        rng.fill_normal(&mut t.data);
        Ok(t)
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = checked_len(dims)?;
        if data.len() != len {
            return Err(FdnError::InvalidDims(
                dims.to_vec(),
                "data length does not match n*c*h*w",
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FdnError::NonFinite("Tensor::from_vec"));
        }
        Ok(Tensor { dims, data })
    }

    /// Wraps a buffer produced inside the crate, checking only finiteness.
    pub(crate) fn from_parts(
        dims: [usize; 4],
        data: Vec<f64>,
        origin: &'static str,
    ) -> Result<Self> {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FdnError::NonFinite(origin));
        }
        Ok(Tensor { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per batch entry.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        let len = checked_len(dims)?;
        if len != self.data.len() {
            return Err(FdnError::InvalidDims(
                dims.to_vec(),
                "reshape changes element count",
            ));
        }
        Ok(Tensor {
            dims,
            data: self.data,
        })
    }

    /// Applies `f` to every element; fails if any result is non-finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::from_parts(
            self.dims,
            self.data.iter().map(|&v| f(v)).collect(),
            "Tensor::map",
        )
    }

    pub fn elementwise(&self, other: &Tensor, op: BinaryOp) -> Result<Self> {
        if self.dims != other.dims {
            return Err(FdnError::ShapeMismatch(self.dims, other.dims));
        }
        if op == BinaryOp::Div {
            if let Some(&d) = other.data.iter().find(|d| d.abs() < DIVISION_FLOOR) {
                return Err(FdnError::DivisionFloor(d));
            }
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => a / b,
            })
            .collect();
        Tensor::from_parts(self.dims, data, "Tensor::elementwise")
    }

    /// Reduces over `axes` (each in `0..4`), keeping reduced axes with size 1.
    pub fn reduce(&self, kind: Reduction, axes: &[usize]) -> Result<Self> {
        let mut keep = [true; 4];
        for &a in axes {
            if a >= 4 {
                return Err(FdnError::InvalidAxis(a));
            }
            keep[a] = false;
        }
        let mut out_dims = self.dims;
        for a in 0..4 {
            if !keep[a] {
                out_dims[a] = 1;
            }
        }
        let mut out = vec![0.0; out_dims.iter().product()];
        let [_, c, h, w] = self.dims;
        let [_, oc, oh, ow] = out_dims;
        for (i, &v) in self.data.iter().enumerate() {
            let iw = i % w;
            let ih = (i / w) % h;
            let ic = (i / (w * h)) % c;
            let inn = i / (w * h * c);
            let pick = |keep: bool, idx: usize| if keep { idx } else { 0 };
            let o = ((pick(keep[0], inn) * oc + pick(keep[1], ic)) * oh + pick(keep[2], ih)) * ow
                + pick(keep[3], iw);
            out[o] += match kind {
                Reduction::AbsSum => v.abs(),
                _ => v,
            };
        }
        if kind == Reduction::Mean {
            let count = (self.data.len() / out.len()) as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        Tensor::from_parts(out_dims, out, "Tensor::reduce")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Population mean and variance per channel over `(n, h, w)`.
    pub fn channel_stats(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let [n, c, h, w] = self.dims;
        let count = n * h * w;
        if count < 2 {
            return Err(FdnError::pre(
                "channel_stats needs at least 2 samples per channel",
            ));
        }
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let plane = |b: usize| &self.data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let s: f64 = (0..n).map(|b| plane(b).iter().sum::<f64>()).sum();
            let m = s / count as f64;
            let ss: f64 = (0..n)
                .map(|b| plane(b).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum();
            mean[ch] = m;
            var[ch] = ss / count as f64;
        }
        Ok((mean, var))
    }

    /// Maximum `|a - b|` divided by `max(|b|_inf, tiny)`.
    pub fn max_rel_diff(&self, reference: &Tensor) -> Result<f64> {
        if self.dims != reference.dims {
            return Err(FdnError::ShapeMismatch(self.dims, reference.dims));
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Ok(diff / reference.max_abs().max(f64::MIN_POSITIVE))
    }

    /// Copies batch entries `range` into a new tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.dims[0] {
            return Err(FdnError::pre("batch slice out of range"));
        }
        let s = self.sample_len();
        let mut dims = self.dims;
        dims[0] = count;
        Ok(Tensor {
            dims,
            data: self.data[start * s..(start + count) * s].to_vec(),
        })
    }

    /// Stacks single-sample tensors of identical `(c, h, w)` along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| FdnError::pre("stack of no tensors"))?;
        let mut dims = first.dims;
        let mut data = Vec::with_capacity(first.len() * items.len());
        dims[0] = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(FdnError::ShapeMismatch(t.dims, first.dims));
            }
            dims[0] += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { dims, data })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    /// Writes the `FDT1` binary layout: magic, four u32 LE dims, then f64 LE values.
    pub fn write_fdt1<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(FDT1_MAGIC)?;
        for &d in &self.dims {
            let d =
                u32::try_from(d).map_err(|_| FdnError::format("dimension does not fit in u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_fdt1<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != FDT1_MAGIC {
            return Err(FdnError::format("bad FDT1 magic"));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(truncated)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let len = checked_len(dims)?;
        let mut bytes = vec![0u8; len * 8];
        input.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::from_vec(dims, data)
    }
}

fn truncated(e: std::io::Error) -> FdnError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        FdnError::format("truncated FDT1 data")
    } else {
        FdnError::Io(e)
    }
}
