//! One-sided Jacobi SVD.
//!
//! Rotates pairs of columns until all are mutually orthogonal; the column
//! norms are then the singular values. Accurate to working precision for the
//! small and mid-sized matrices used here (up to a few thousand per side).

use super::DenseMatrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
const TOL: f64 = 1e-15;

/// Thin SVD `A = U diag(s) Vt` with `s` descending.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m x r` left singular vectors, `r = min(m, n)`.
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    /// `r x n` right singular vectors (transposed).
    pub vt: DenseMatrix,
}

/// All `min(rows, cols)` singular values, descending.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.s)
}

pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if a.rows() >= a.cols() {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(rows: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = rows.split_at_mut(q * len);
    let rp = &mut lo[p * len..(p + 1) * len];
    let rq = &mut hi[..len];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// `a` is `m x n` with `m >= n`.
fn jacobi_tall(a: &DenseMatrix) -> Svd {
    let (m, n) = a.shape();
    // row j of `w` is column j of A V; row j of `v` is column j of V
    let mut w = a.transpose().into_data();
    let mut v = DenseMatrix::identity(n).into_data();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let wp = &w[p * m..(p + 1) * m];
                let wq = &w[q * m..(q + 1) * m];
                let alpha = dot(wp, wp);
                let beta = dot(wq, wq);
                let gamma = dot(wp, wq);
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, m, p, q, c, s);
                rotate(&mut v, n, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(&w[j * m..(j + 1) * m], &w[j * m..(j + 1) * m]).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u = DenseMatrix::zeros(m, n);
    let mut vt = DenseMatrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (out, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u.set(i, out, w[j * m + i] / sigma);
            }
        }
        vt.row_mut(out).copy_from_slice(&v[j * n..(j + 1) * n]);
    }
    Svd { u, s, vt }
}
