//! 3x3 zero-padded convolution kernels built on im2col + GEMM.
//!
//! Feature buffers use a channel-major `(c, batch, h, w)` layout so one GEMM
//! covers a whole batch. Column buffers have row `ci * 9 + ky * 3 + kx` and
//! column `b * h * w + y * w + x`, holding `src[ci][b][y + ky - 1][x + kx - 1]`
//! (0 outside the image). A weight tensor `(cout, cin, 3, 3)` in row-major
//! order is then exactly the `cout x cin*9` matrix that multiplies the column
//! buffer.

/// Fills rows `[ch0 * 9, (ch0 + ch) * 9)` of `col` from `src`, which holds
/// `ch` channels of `batch` planes of `h x w`.
pub fn im2col(
    src: &[f64],
    ch: usize,
    batch: usize,
    h: usize,
    w: usize,
    col: &mut [f64],
    ch0: usize,
) {
    let hw = h * w;
    let cols = batch * hw;
    debug_assert!(src.len() >= ch * cols);
    for ci in 0..ch {
        for b in 0..batch {
            let plane = &src[ci * cols + b * hw..ci * cols + (b + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ch0 + ci) * 9 + ky * 3 + kx) * cols + b * hw;
                    let dst = &mut col[row..row + hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let line = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                line[0] = 0.0;
                                line[1..].copy_from_slice(&srow[..w - 1]);
                            }
                            1 => line.copy_from_slice(srow),
                            _ => {
                                line[..w - 1].copy_from_slice(&srow[1..]);
                                line[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column rows for `ch` channels into `dst`.
pub fn col2im_add(col: &[f64], ch: usize, batch: usize, h: usize, w: usize, dst: &mut [f64]) {
    let hw = h * w;
    let cols = batch * hw;
    for ci in 0..ch {
        for b in 0..batch {
            let plane = &mut dst[ci * cols + b * hw..ci * cols + (b + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * cols + b * hw;
                    let src = &col[row..row + hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let line = &src[y * w..(y + 1) * w];
                        let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                for (p, l) in prow[..w - 1].iter_mut().zip(&line[1..]) {
                                    *p += l;
                                }
                            }
                            1 => {
                                for (p, l) in prow.iter_mut().zip(line) {
                                    *p += l;
                                }
                            }
                            _ => {
                                for (p, l) in prow[1..].iter_mut().zip(&line[..w - 1]) {
                                    *p += l;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Strided matrix view for [`gemm`]: `(data, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

/// `c (m x n, row-major) = alpha * a (m x k) * b (k x n) + beta * c`.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef,
    b: MatRef,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_idx = |mat: &MatRef, r: usize, cc: usize| (r - 1) * mat.rs + (cc - 1) * mat.cs;
    if k > 0 {
        assert!(max_idx(&a, m, k) < a.data.len());
        assert!(max_idx(&b, k, n) < b.data.len());
    }
    assert!(c.len() >= m * n);
    // SAFETY: bounds of all three operands are checked above against the
    // stated shapes and strides; the slices do not alias (c is &mut).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_conv(
        src: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        cout: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    s += wt[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * src[(ci * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[(co * h + y) * w + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let mut rng = Rng::new(2);
        let (cin, cout, h, w) = (3, 4, 5, 6);
        let mut src = vec![0.0; cin * h * w];
        let mut wt = vec![0.0; cout * cin * 9];
        rng.fill_normal(&mut src);
        rng.fill_normal(&mut wt);
        let mut col = vec![0.0; cin * 9 * h * w];
        im2col(&src, cin, 1, h, w, &mut col, 0);
        let mut out = vec![0.0; cout * h * w];
        gemm(
            cout,
            cin * 9,
            h * w,
            1.0,
            MatRef::rows(&wt, cin * 9),
            MatRef::rows(&col, h * w),
            0.0,
            &mut out,
        );
        let direct = naive_conv(&src, cin, h, w, &wt, cout);
        for (a, b) in out.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = Rng::new(3);
        let (ch, h, w) = (2, 4, 3);
        let mut x = vec![0.0; ch * 2 * h * w];
        let mut y = vec![0.0; ch * 9 * 2 * h * w];
        rng.fill_normal(&mut x);
        rng.fill_normal(&mut y);
        let mut col = vec![0.0; y.len()];
        im2col(&x, ch, 2, h, w, &mut col, 0);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, ch, 2, h, w, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn single_pixel_image() {
        let src = [2.0];
        let mut col = vec![9.0; 9];
        im2col(&src, 1, 1, 1, 1, &mut col, 0);
        assert_eq!(col, vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
