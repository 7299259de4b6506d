//! Small dense square-matrix routines (row-major `n x n`).

use crate::error::{FdnError, Result};
use crate::rng::Rng;

/// Matrices whose `|det|` falls below this are treated as singular.
pub const SINGULAR_FLOOR: f64 = 1e-12;

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    /// Packed factors: strict lower part holds L (unit diagonal), upper part U.
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n, "matrix buffer is not n*n");
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pmax) =
                (k..n)
                    .map(|i| (i, lu[i * n + k].abs()))
                    .fold(
                        (k, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if pmax == 0.0 {
                return Err(FdnError::Singular(0.0));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let l = lu[i * n + k] / pivot;
                lu[i * n + k] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= l * lu[k * n + j];
                    }
                }
            }
        }
        let f = Lu { n, lu, perm, sign };
        let det = f.det();
        if !det.is_finite() || det.abs() < SINGULAR_FLOOR {
            return Err(FdnError::Singular(det.abs()));
        }
        Ok(f)
    }

    pub fn det(&self) -> f64 {
        (0..self.n).fold(self.sign, |d, i| d * self.lu[i * self.n + i])
    }

    /// `log|det A|` summed from the pivots, without forming the product.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .sum()
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }

    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.solve(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

pub fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Random orthogonal matrix: modified Gram–Schmidt (two passes) on the
/// columns of a standard-normal matrix, with column signs fixed so that
/// the implied `R` has a positive diagonal.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut g = vec![0.0; n * n];
        rng.fill_normal(&mut g);
        // work column-wise
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..n).map(|i| g[i * n + j]).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            let original_norm = norm(&cols[j]);
            for _pass in 0..2 {
                for k in 0..j {
                    let d = dot(&cols[j], &cols[k]);
                    let (head, tail) = cols.split_at_mut(j);
                    for (x, q) in tail[0].iter_mut().zip(&head[k]) {
                        *x -= d * q;
                    }
                }
            }
            let nrm = norm(&cols[j]);
            if nrm < 1e-8 * original_norm.max(1.0) {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|x| *x /= nrm);
        }
        if ok {
            let mut q = vec![0.0; n * n];
            for j in 0..n {
                for i in 0..n {
                    q[i * n + j] = cols[j][i];
                }
            }
            return q;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
