//! Orthogonality penalty on both generation levels.
//!
//! `sum_i ||W_i^b W_i^b^T - I||^2 + ||U~_i^T U~_i - I||^2` plus
//! `||V~^T V~ - I||^2`, where `U~` and `V~` divide every column by its
//! squared norm. Skipped levels contribute nothing.

use crate::error::{Error, Result};
use crate::generator::{FactorGrads, GeneratorParams};
use crate::tensor::{gemm, DenseMatrix};

#[derive(Clone, Debug)]
pub struct OrthoOutput {
    pub value: f64,
    pub grads: FactorGrads,
}

/// `||A A^T - I||^2` and its gradient `4 (A A^T - I) A`.
fn row_gram_penalty(a: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let mut g = gemm(a, &a.transpose())?;
    for i in 0..g.rows() {
        g.set(i, i, g.get(i, i) - 1.0);
    }
    Ok((g.frobenius_sq(), gemm(&g, a)?.scaled(4.0)))
}

/// `||A~^T A~ - I||^2` with `a~_j = a_j / ||a_j||^2`, and its gradient in `A`.
fn col_gram_penalty(a: &DenseMatrix, what: &str) -> Result<(f64, DenseMatrix)> {
    let (rows, cols) = a.shape();
    let norms: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| a.get(i, j).powi(2)).sum()).collect();
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("{what} column {j} has zero norm")));
    }
    let tilde = DenseMatrix::from_fn(rows, cols, |i, j| a.get(i, j) / norms[j]);
    let mut g = gemm(&tilde.transpose(), &tilde)?;
    for i in 0..cols {
        g.set(i, i, g.get(i, i) - 1.0);
    }
    let d_tilde = gemm(&tilde, &g)?.scaled(4.0);
    // d/da of a / n with n = a.a: g / n - 2 a (a.g) / n^2
    let mut grad = DenseMatrix::zeros(rows, cols);
    for j in 0..cols {
        let n = norms[j];
        let ag: f64 = (0..rows).map(|i| a.get(i, j) * d_tilde.get(i, j)).sum();
        for i in 0..rows {
            grad.set(i, j, d_tilde.get(i, j) / n - 2.0 * a.get(i, j) * ag / (n * n));
        }
    }
    Ok((g.frobenius_sq(), grad))
}

pub fn ortho_reg(p: &GeneratorParams) -> Result<OrthoOutput> {
    p.validate()?;
    let mut grads = FactorGrads::zeros_like(p);
    let mut value = 0.0;
    if p.card.intra {
        for (i, (b, u)) in p.basis.iter().zip(&p.coeff).enumerate() {
            let (vb, gb) = row_gram_penalty(b)?;
            let (vu, gu) = col_gram_penalty(u, "U")?;
            value += vb + vu;
            grads.basis[i] = gb;
            grads.coeff[i] = gu;
        }
    }
    if let Some(v) = &p.cross {
        let (vv, gv) = col_gram_penalty(v, "V")?;
        value += vv;
        grads.cross = Some(gv);
    }
    Ok(OrthoOutput { value, grads })
}
