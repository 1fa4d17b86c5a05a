//! Initialization recovery and precision enumeration checks.

use std::collections::BTreeSet;

use insitu_core::generator::{generate, generate_kernel, validate_cardinality, GeneratorParams, KernelDims, QuantConfig};
use insitu_core::quant::{distinct_value_bound, half_levels};
use insitu_core::train::{l2_project_init, svd_init, L2InitConfig};
use insitu_core::tensor::gemm;
use rand::Rng;

use super::{matrix, rng};

/// `(C_o, C_i, k, B_i, B_c)` shapes with both levels active.
pub const PLANTED: [(usize, usize, usize, usize, usize); 4] =
    [(8, 4, 3, 2, 3), (16, 8, 3, 2, 5), (32, 32, 5, 2, 12), (32, 1, 5, 2, 12)];

/// Worst relative residual of the projection fit on teachers generated
/// from random factors of the same cardinality.
pub fn planted_l2_worst(seeds: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for &(co, ci, k, bi, bc) in &PLANTED {
        let dims = KernelDims::new(co, ci, k);
        let card = validate_cardinality(dims, bi, bc).map_err(|e| e.to_string())?;
        for seed in 0..seeds {
            let mut r = rng(100 + seed);
            let teacher = generate_kernel(&GeneratorParams::random(dims, card, &mut r), None).unwrap();
            let fit = l2_project_init(&teacher, dims, bi, bc, &L2InitConfig::default(), &mut r)
                .map_err(|e| e.to_string())?;
            worst = worst.max(fit.relative_residual);
        }
    }
    Ok(worst)
}

/// Worst relative residual of the SVD start on rank-`B_c` teachers with
/// the intra level skipped.
pub fn rank_bc_svd_worst(cases: usize) -> Result<f64, String> {
    let mut r = rng(200);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (co, ci, k) = (r.gen_range(4..40), r.gen_range(1..12), [1, 3, 5][r.gen_range(0..3)]);
        let dims = KernelDims::new(co, ci, k);
        let bc = r.gen_range(1..co.min(dims.row_len()).max(2));
        // B_i at the cap, so only the cross level is generated
        let bi = ci.min(k * k);
        let teacher = gemm(&matrix(co, bc, &mut r), &matrix(bc, dims.row_len(), &mut r)).unwrap();
        let card = validate_cardinality(dims, bi, bc).map_err(|e| e.to_string())?;
        if card.intra {
            return Err(format!("{co}x{ci}x{k}: intra level unexpectedly active"));
        }
        let fit = svd_init(&teacher, dims, bi, bc).map_err(|e| e.to_string())?;
        worst = worst.max(fit.relative_residual);
    }
    Ok(worst)
}

/// Exhaustive distinct-value count of one basis entry `sum_b u_b w_b`
/// over all quantization codes of `B_i` coefficient and basis pairs.
pub fn enumerate_basis_values(bi: usize, qb: u32, qu: u32) -> usize {
    let (lb, lu) = (half_levels(qb), half_levels(qu));
    let products: BTreeSet<i64> = (-lu..=lu).flat_map(|a| (-lb..=lb).map(move |b| a * b)).collect();
    let mut sums = BTreeSet::from([0i64]);
    for _ in 0..bi {
        sums = sums.iter().flat_map(|s| products.iter().map(move |p| s + p)).collect();
    }
    sums.len()
}

/// Checks the distinct-value bound of quantized `W_c` for every
/// `(q_b, q_u, B_i)` in `{1..4} x {1..4} x {1..3}`, by code enumeration
/// and on kernels produced by the quantized generator.
pub fn precision_bound_holds() -> Result<usize, String> {
    let mut r = rng(300);
    let mut checked = 0;
    for qb in 1..=4 {
        for qu in 1..=4 {
            for bi in 1..=3 {
                let bound = distinct_value_bound(bi, 2, qb, qu, 4).count_c;
                let enumerated = enumerate_basis_values(bi, qb, qu) as u128;
                if enumerated > bound {
                    return Err(format!("(q_b {qb}, q_u {qu}, B_i {bi}): {enumerated} codes > {bound}"));
                }
                let dims = KernelDims::new(6, 5, 3);
                let card = validate_cardinality(dims, bi, 2).unwrap();
                let quant = QuantConfig::new(qb, qu, 4, 16).unwrap();
                for _ in 0..5 {
                    let p = GeneratorParams::random(dims, card, &mut r);
                    let g = generate(&p, Some(&quant)).map_err(|e| e.to_string())?;
                    let [sb, su, _] = g.scales.ok_or("quantized generation reported no scales")?;
                    let (lb, lu) = (half_levels(qb), half_levels(qu));
                    // entries are integer multiples of the product of the two grid steps
                    let step = if lb == 0 || lu == 0 { 1.0 } else { sb * su / (lb * lu) as f64 };
                    let mut distinct = BTreeSet::new();
                    for v in g.wc.data() {
                        let code = v / step;
                        let off_grid = if lb * lu == 0 { *v != 0.0 } else { (code - code.round()).abs() > 1e-6 };
                        if off_grid {
                            return Err(format!("(q_b {qb}, q_u {qu}, B_i {bi}): {v} off the product grid"));
                        }
                        distinct.insert(code.round() as i64);
                    }
                    if distinct.len() as u128 > bound {
                        return Err(format!("(q_b {qb}, q_u {qu}, B_i {bi}): W_c holds {} values > {bound}", distinct.len()));
                    }
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}
