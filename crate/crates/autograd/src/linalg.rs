//! Dense LU factorization and helpers for square matrices.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `P A = L U` with partial pivoting, packed in one matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &Tensor) -> Result<Self> {
        let dims = a.dims();
        if dims.len() != 2 || dims[0] != dims[1] {
            return Err(Error::Shape(format!("LU needs a square matrix, got {dims:?}")));
        }
        let n = dims[0];
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pv < 1e-300 {
                return Err(Error::Singular(format!("zero pivot in column {k}")));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let d = lu[k * n + k];
            let (head, tail) = lu.split_at_mut((k + 1) * n);
            let pivot_row = &head[k * n + k + 1..(k + 1) * n];
            for row in tail.chunks_exact_mut(n) {
                let f = row[k] / d;
                row[k] = f;
                if f != 0.0 {
                    row[k + 1..].iter_mut().zip(pivot_row).for_each(|(r, &p)| *r -= f * p);
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>()
    }

    /// Solves `A x = b` for one right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    /// `A^-1`, solving for all columns at once with row operations.
    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        let mut x = vec![0.0; n * n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * n + p] = 1.0;
        }
        for i in 1..n {
            let (done, rest) = x.split_at_mut(i * n);
            let xi = &mut rest[..n];
            for j in 0..i {
                let l = self.lu[i * n + j];
                if l != 0.0 {
                    xi.iter_mut().zip(&done[j * n..(j + 1) * n]).for_each(|(a, &b)| *a -= l * b);
                }
            }
        }
        for i in (0..n).rev() {
            let (head, solved) = x.split_at_mut((i + 1) * n);
            let xi = &mut head[i * n..];
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                if u != 0.0 {
                    let xj = &solved[(j - i - 1) * n..(j - i) * n];
                    xi.iter_mut().zip(xj).for_each(|(a, &b)| *a -= u * b);
                }
            }
            let d = self.lu[i * n + i];
            xi.iter_mut().for_each(|a| *a /= d);
        }
        Tensor::new(vec![n, n], x).expect("square")
    }
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    Ok(Lu::new(a)?.inverse())
}

/// Random orthogonal matrix: Gram-Schmidt on a Gaussian matrix, with the
/// first row negated if needed so that the determinant is `+1`.
pub fn random_orthogonal(n: usize, rng: &mut RngStream) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        // twice for numerical orthogonality
        for _ in 0..2 {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push(v);
    }
    let mut t = Tensor::from_rows(&rows).expect("square");
    if Lu::new(&t).map(|lu| lu.det()).unwrap_or(1.0) < 0.0 {
        t.row_mut(0).iter_mut().for_each(|x| *x = -*x);
    }
    t
}
