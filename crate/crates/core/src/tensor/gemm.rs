use super::{shape_str, DenseMatrix};
use crate::error::{shape_err, Result};

const MR: usize = 8;
const NR: usize = 8;
/// Inner-dimension block: an `MR x KC` slice of `a` and a `KC x NR` panel of
/// `b` fit in L1 together.
const KC: usize = 256;
/// Column block: a packed `KC x NC` slice of `b` stays in L2.
const NC: usize = 512;

/// `a * b`.
pub fn gemm(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(shape_err("gemm", shape_str(a), shape_str(b)));
    }
    let mut c = DenseMatrix::zeros(a.rows(), b.cols());
    gemm_into(a.rows(), a.cols(), b.cols(), a.data(), b.data(), c.data_mut());
    Ok(c)
}

/// Overwrites `c` (`m x n`) with `a` (`m x k`) times `b` (`k x n`), all row-major.
///
/// Every output element is accumulated as `((0 + a0*b0) + a1*b1) + ...` in
/// increasing `k`, the same rounding sequence as a naive triple loop. The
/// inner dimension is processed in blocks of `KC` whose partial sums carry
/// over through `c`, which keeps that sequence intact.
pub fn gemm_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    c.fill(0.0);
    if k == 0 {
        return;
    }

    let full_cols = n - n % NR;
    let full_rows = m - m % MR;
    let kc_max = KC.min(k);
    let mut a_packed = vec![0.0; full_rows * kc_max];
    let mut b_packed = vec![0.0; kc_max * NC.min(full_cols)];
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        // row blocks of `a` stored k-major so the kernel reads MR values per step
        for i0 in (0..full_rows).step_by(MR) {
            let blk = &mut a_packed[i0 * kc..(i0 + MR) * kc];
            for kk in 0..kc {
                for r in 0..MR {
                    blk[kk * MR + r] = a[(i0 + r) * k + k0 + kk];
                }
            }
        }
        for jc in (0..full_cols).step_by(NC) {
            let nc = NC.min(full_cols - jc);
            // `nc / NR` panels of `kc x NR`, each contiguous
            for p in 0..nc / NR {
                let panel = &mut b_packed[p * kc * NR..(p + 1) * kc * NR];
                for kk in 0..kc {
                    let src = (k0 + kk) * n + jc + p * NR;
                    panel[kk * NR..(kk + 1) * NR].copy_from_slice(&b[src..src + NR]);
                }
            }
            for i0 in (0..full_rows).step_by(MR) {
                let ablk = &a_packed[i0 * kc..(i0 + MR) * kc];
                for p in 0..nc / NR {
                    let j0 = jc + p * NR;
                    let mut acc = [[0.0f64; NR]; MR];
                    for r in 0..MR {
                        acc[r].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                    }
                    let acc = micro_kernel(kc, ablk, &b_packed[p * kc * NR..(p + 1) * kc * NR], acc);
                    for r in 0..MR {
                        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(&acc[r]);
                    }
                }
            }
            for i in full_rows..m {
                let arow = &a[i * k + k0..i * k + k0 + kc];
                for p in 0..nc / NR {
                    let j0 = jc + p * NR;
                    let panel = &b_packed[p * kc * NR..(p + 1) * kc * NR];
                    let acc = &mut c[i * n + j0..i * n + j0 + NR];
                    for (kk, &av) in arow.iter().enumerate() {
                        let bv = &panel[kk * NR..(kk + 1) * NR];
                        for jj in 0..NR {
                            acc[jj] += av * bv[jj];
                        }
                    }
                }
            }
        }
        if full_cols < n {
            for i in 0..m {
                let acc = &mut c[i * n + full_cols..(i + 1) * n];
                let arow = &a[i * k + k0..i * k + k0 + kc];
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &b[(k0 + kk) * n + full_cols..(k0 + kk + 1) * n];
                    for (x, &bv) in acc.iter_mut().zip(brow) {
                        *x += av * bv;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(k: usize, a: &[f64], panel: &[f64], mut local: [[f64; NR]; MR]) -> [[f64; NR]; MR] {
    for kk in 0..k {
        let bv: &[f64; NR] = panel[kk * NR..(kk + 1) * NR].try_into().unwrap();
        let av: &[f64; MR] = a[kk * MR..(kk + 1) * MR].try_into().unwrap();
        for r in 0..MR {
            let av = av[r];
            for jj in 0..NR {
                local[r][jj] += av * bv[jj];
            }
        }
    }
    local
}
