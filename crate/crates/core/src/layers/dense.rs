//! Dense-block subnetwork used for the coupling functions.
//!
//! Three 3x3 convolution stages of `width` channels each; stage `j` reads the
//! concatenation of the block input and all earlier stage outputs and applies
//! a leaky ReLU. A final 3x3 convolution maps the full concatenation to the
//! output channels and starts at zero, so a fresh subnet outputs 0.

use std::cell::RefCell;

use crate::conv::{col2im_add, gemm, im2col, MatRef};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STAGES: usize = 3;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct DenseSubnet {
    cin: usize,
    cout: usize,
    width: usize,
    /// `(width, cin + j * width, 3, 3)` for stage `j`, then the biases, then
    /// the final `(cout, cin + 3 * width, 3, 3)` weight and its bias.
    params: Vec<Tensor>,
}

/// Post-activation feature maps, one channel-major buffer of
/// `(cin + 3 * width, chunk, h, w)` per batch chunk.
#[derive(Clone, Debug)]
pub struct DenseCache {
    chunks: Vec<Vec<f64>>,
    n: usize,
    h: usize,
    w: usize,
}

/// Pixel budget per GEMM; bounds the column buffer size.
const CHUNK_PIXELS: usize = 256;

thread_local! {
    // Column buffers are fully overwritten before each read, so they are
    // reused across calls instead of being allocated zeroed every time.
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (a, b) = &mut *guard;
        if a.len() < len {
            a.resize(len, 0.0);
            b.resize(len, 0.0);
        }
        f(&mut a[..len], &mut b[..len])
    })
}

fn chunk_ranges(n: usize, hw: usize) -> impl Iterator<Item = (usize, usize)> {
    let per = (CHUNK_PIXELS / hw).max(1);
    (0..n).step_by(per).map(move |b0| (b0, (b0 + per).min(n)))
}

/// Copies entries `b0..b1` of an `(n, c, hw)` buffer into `(c, b1 - b0, hw)`.
fn to_channel_major(src: &[f64], c: usize, hw: usize, b0: usize, b1: usize, dst: &mut [f64]) {
    let m = b1 - b0;
    for ci in 0..c {
        for b in b0..b1 {
            let d = (ci * m + (b - b0)) * hw;
            let s = (b * c + ci) * hw;
            dst[d..d + hw].copy_from_slice(&src[s..s + hw]);
        }
    }
}

fn from_channel_major(src: &[f64], c: usize, hw: usize, b0: usize, b1: usize, dst: &mut [f64]) {
    let m = b1 - b0;
    for ci in 0..c {
        for b in b0..b1 {
            let s = (ci * m + (b - b0)) * hw;
            let d = (b * c + ci) * hw;
            dst[d..d + hw].copy_from_slice(&src[s..s + hw]);
        }
    }
}

fn fill_bias(dst: &mut [f64], bias: &[f64], cols: usize) {
    for (row, &b) in dst.chunks_exact_mut(cols).zip(bias) {
        row.fill(b);
    }
}

fn add_row_sums(src: &[f64], cols: usize, acc: &mut [f64]) {
    for (row, a) in src.chunks_exact(cols).zip(acc.iter_mut()) {
        *a += row.iter().sum::<f64>();
    }
}

impl DenseSubnet {
    pub fn new(cin: usize, cout: usize, width: usize, rng: &mut Rng) -> Self {
        let mut params = Vec::with_capacity(2 * STAGES + 2);
        for j in 0..STAGES {
            let fan_in = (cin + j * width) * 9;
            // He initialization for leaky ReLU.
            let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
            let mut w = Tensor::randn([width, cin + j * width, 3, 3], rng).expect("valid dims");
            w.data_mut().iter_mut().for_each(|v| *v *= std);
            params.push(w);
        }
        for _ in 0..STAGES {
            params.push(Tensor::zeros([1, width, 1, 1]).expect("valid dims"));
        }
        params.push(Tensor::zeros([cout, cin + STAGES * width, 3, 3]).expect("valid dims"));
        params.push(Tensor::zeros([1, cout, 1, 1]).expect("valid dims"));
        DenseSubnet {
            cin,
            cout,
            width,
            params,
        }
    }

    pub fn cin(&self) -> usize {
        self.cin
    }

    pub fn cout(&self) -> usize {
        self.cout
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_names() -> [&'static str; 2 * STAGES + 2] {
        ["w0", "w1", "w2", "b0", "b1", "b2", "wout", "bout"]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn total_channels(&self) -> usize {
        self.cin + STAGES * self.width
    }

    fn stage_in(&self, j: usize) -> usize {
        self.cin + j * self.width
    }

    /// Applies the subnet to `n` entries of `cin x h x w` stored in `input`.
    /// Returns `n x cout x h x w`, plus the activations when `keep` is set.
    pub fn forward(
        &self,
        input: &[f64],
        n: usize,
        h: usize,
        w: usize,
        keep: bool,
    ) -> (Vec<f64>, Option<DenseCache>) {
        let hw = h * w;
        let total = self.total_channels();
        let mut out = vec![0.0; n * self.cout * hw];
        let mut kept = Vec::new();
        for (b0, b1) in chunk_ranges(n, hw) {
            let m = b1 - b0;
            let cols = m * hw;
            let mut feat = vec![0.0; total * cols];
            with_scratch(total * 9 * cols, |col, _| {
                to_channel_major(input, self.cin, hw, b0, b1, &mut feat);
                im2col(&feat, self.cin, m, h, w, col, 0);
                for j in 0..STAGES {
                    let cj = self.stage_in(j);
                    let dst = &mut feat[cj * cols..(cj + self.width) * cols];
                    fill_bias(dst, self.params[STAGES + j].data(), cols);
                    gemm(
                        self.width,
                        cj * 9,
                        cols,
                        1.0,
                        MatRef::rows(self.params[j].data(), cj * 9),
                        MatRef::rows(&col[..cj * 9 * cols], cols),
                        1.0,
                        dst,
                    );
                    for v in dst.iter_mut() {
                        if *v < 0.0 {
                            *v *= LEAKY_SLOPE;
                        }
                    }
                    im2col(
                        &feat[cj * cols..(cj + self.width) * cols],
                        self.width,
                        m,
                        h,
                        w,
                        col,
                        cj,
                    );
                }
                let mut res = vec![0.0; self.cout * cols];
                fill_bias(&mut res, self.params[2 * STAGES + 1].data(), cols);
                gemm(
                    self.cout,
                    total * 9,
                    cols,
                    1.0,
                    MatRef::rows(self.params[2 * STAGES].data(), total * 9),
                    MatRef::rows(col, cols),
                    1.0,
                    &mut res,
                );
                from_channel_major(&res, self.cout, hw, b0, b1, &mut out);
            });
            if keep {
                kept.push(feat);
            }
        }
        let cache = keep.then_some(DenseCache {
            chunks: kept,
            n,
            h,
            w,
        });
        (out, cache)
    }

    /// Backpropagates `grad_out` (`n x cout x h x w`). Parameter gradients are
    /// added into `grads` (same order as [`Self::params`]); returns the input gradient.
    pub fn backward(
        &self,
        cache: &DenseCache,
        grad_out: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let hw = h * w;
        let total = self.total_channels();
        let mut grad_in = vec![0.0; n * self.cin * hw];
        for ((b0, b1), feat) in chunk_ranges(n, hw).zip(&cache.chunks) {
            let m = b1 - b0;
            let cols = m * hw;
            with_scratch(total * 9 * cols, |col, dcol| {
                let mut dfeat = vec![0.0; total * cols];
                let mut gout = vec![0.0; self.cout * cols];
                to_channel_major(grad_out, self.cout, hw, b0, b1, &mut gout);
                im2col(feat, total, m, h, w, col, 0);

                // final convolution
                gemm(
                    self.cout,
                    cols,
                    total * 9,
                    1.0,
                    MatRef::rows(&gout, cols),
                    MatRef::transposed(col, cols),
                    1.0,
                    &mut grads[2 * STAGES],
                );
                add_row_sums(&gout, cols, &mut grads[2 * STAGES + 1]);
                gemm(
                    total * 9,
                    self.cout,
                    cols,
                    1.0,
                    MatRef::transposed(self.params[2 * STAGES].data(), total * 9),
                    MatRef::rows(&gout, cols),
                    0.0,
                    dcol,
                );
                col2im_add(dcol, total, m, h, w, &mut dfeat);

                for j in (0..STAGES).rev() {
                    let cj = self.stage_in(j);
                    let (lower, upper) = dfeat.split_at_mut(cj * cols);
                    let dpre = &mut upper[..self.width * cols];
                    for (g, &f) in dpre
                        .iter_mut()
                        .zip(&feat[cj * cols..(cj + self.width) * cols])
                    {
                        // leaky ReLU keeps the sign, so the output decides the branch
                        if f < 0.0 {
                            *g *= LEAKY_SLOPE;
                        }
                    }
                    gemm(
                        self.width,
                        cols,
                        cj * 9,
                        1.0,
                        MatRef::rows(dpre, cols),
                        MatRef::transposed(&col[..cj * 9 * cols], cols),
                        1.0,
                        &mut grads[j],
                    );
                    add_row_sums(dpre, cols, &mut grads[STAGES + j]);
                    let dc = &mut dcol[..cj * 9 * cols];
                    gemm(
                        cj * 9,
                        self.width,
                        cols,
                        1.0,
                        MatRef::transposed(self.params[j].data(), cj * 9),
                        MatRef::rows(dpre, cols),
                        0.0,
                        dc,
                    );
                    col2im_add(dc, cj, m, h, w, lower);
                }
                from_channel_major(&dfeat, self.cin, hw, b0, b1, &mut grad_in);
            });
        }
        grad_in
    }
}
