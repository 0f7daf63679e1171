//! LU factorization with partial pivoting for small square matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pivots with magnitude below this are treated as exact singularity.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

/// Packed `PA = LU` factorization. `L` has an implicit unit diagonal.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    swaps: usize,
}

impl Lu {
    pub fn factor(w: &Tensor) -> Result<Self> {
        let n = w.square_dim("lu")?;
        let mut lu = w.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for col in 0..n {
            let (p, pmag) = (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmag < PIVOT_THRESHOLD || !pmag.is_finite() {
                return Err(Error::Singular {
                    context: format!("{n}x{n} LU factorization, column {col}"),
                    pivot: pmag,
                });
            }
            if p != col {
                for j in 0..n {
                    lu.swap(p * n + j, col * n + j);
                }
                perm.swap(p, col);
                swaps += 1;
            }
            let pivot = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / pivot;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for j in col + 1..n {
                        lu[r * n + j] -= f * lu[col * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm, swaps })
    }

    /// `(sign, log|det|)`.
    pub fn slogdet(&self) -> (f64, f64) {
        let mut sign = if self.swaps.is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut logabs = 0.0;
        for i in 0..self.n {
            let d = self.lu[i * self.n + i];
            if d < 0.0 {
                sign = -sign;
            }
            logabs += d.abs().ln();
        }
        (sign, logabs)
    }

    /// Solve `A x = b` for a single right-hand side.
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

    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        Tensor::new(vec![n, n], inv).expect("square")
    }
}

/// Sign and log-magnitude of the determinant.
pub fn slogdet_lu(w: &Tensor) -> Result<(f64, f64)> {
    Ok(Lu::factor(w)?.slogdet())
}

pub fn mat_inverse(w: &Tensor) -> Result<Tensor> {
    Ok(Lu::factor(w)?.inverse())
}
