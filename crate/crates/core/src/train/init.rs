//! Fitting generator factors to a pretrained dense kernel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::generator::{generate, validate_cardinality, GeneratorParams, KernelDims};
use crate::tensor::{shape_str, svd, DenseMatrix};

use super::radam::RAdam;

/// Factors plus how well they reproduce the target.
#[derive(Clone, Debug)]
pub struct InitResult {
    pub params: GeneratorParams,
    /// `||W_teacher - W_generated||_F`.
    pub residual: f64,
    /// `residual / ||W_teacher||_F` (0 for a zero teacher reproduced exactly).
    pub relative_residual: f64,
    pub iterations: usize,
}

/// Settings of the projection fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2InitConfig {
    pub iters: usize,
    pub lr: f64,
    /// Cosine-anneal the step size to `lr * final_lr_ratio` over `iters`.
    pub final_lr_ratio: f64,
    /// Stop early once the relative residual drops below this.
    pub tolerance: f64,
    /// Extra random starts tried when the SVD start stalls above `tolerance`.
    pub restarts: usize,
}

impl Default for L2InitConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            lr: 0.02,
            final_lr_ratio: 1e-3,
            tolerance: 1e-9,
            restarts: 3,
        }
    }
}

impl L2InitConfig {
    fn lr_at(&self, it: usize) -> f64 {
        let frac = it as f64 / self.iters.max(1) as f64;
        let floor = self.lr * self.final_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

fn check_teacher(teacher: &DenseMatrix, dims: KernelDims) -> Result<()> {
    if teacher.shape() != (dims.c_out, dims.row_len()) {
        return Err(shape_err(
            "teacher kernel",
            shape_str(teacher),
            format!("{}x{}", dims.c_out, dims.row_len()),
        ));
    }
    if !teacher.is_finite() {
        return Err(Error::NonFinite("teacher kernel".into()));
    }
    Ok(())
}

fn finish(params: GeneratorParams, teacher: &DenseMatrix, iterations: usize) -> Result<InitResult> {
    let w = generate(&params, None)?.kernel;
    let residual = w.sub(teacher)?.frobenius_norm();
    let norm = teacher.frobenius_norm();
    let relative_residual = if norm > 0.0 { residual / norm } else { residual };
    Ok(InitResult {
        params,
        residual,
        relative_residual,
        iterations,
    })
}

/// Fits factors minimizing `||W_teacher - V {U_i W_i^b}||_F^2` with RAdam.
///
/// The objective is non-convex and plain descent can stall in a poor local
/// minimum, so the fit first refines the truncated-SVD factors and then, while
/// the residual stays above `tolerance`, tries up to `restarts` random starts
/// whose outermost factor (`V`, or the `U_i` when cross generation is
/// skipped) is zeroed. The best run wins. With both levels skipped the
/// teacher is copied verbatim.
pub fn l2_project_init(
    teacher: &DenseMatrix,
    dims: KernelDims,
    bi: usize,
    bc: usize,
    cfg: &L2InitConfig,
    rng: &mut impl Rng,
) -> Result<InitResult> {
    check_teacher(teacher, dims)?;
    let card = validate_cardinality(dims, bi, bc)?;
    if !card.intra && !card.cross {
        return finish(GeneratorParams::from_dense(dims, teacher)?, teacher, 0);
    }
    let mut best = l2_refine(teacher, svd_init(teacher, dims, bi, bc)?.params, cfg)?;
    let mut iterations = best.iterations;
    for _ in 0..cfg.restarts {
        if best.relative_residual <= cfg.tolerance {
            break;
        }
        let mut p = GeneratorParams::random(dims, card, rng);
        match p.cross.as_mut() {
            Some(v) => v.data_mut().fill(0.0),
            None => p.coeff.iter_mut().for_each(|u| u.data_mut().fill(0.0)),
        }
        let run = l2_refine(teacher, p, cfg)?;
        iterations += run.iterations;
        if run.relative_residual < best.relative_residual {
            best = run;
        }
    }
    best.iterations = iterations;
    Ok(best)
}

/// Continues the projection fit from existing factors; never returns a
/// worse fit than the starting point.
pub fn l2_refine(teacher: &DenseMatrix, mut p: GeneratorParams, cfg: &L2InitConfig) -> Result<InitResult> {
    check_teacher(teacher, p.dims)?;
    let start = finish(p.clone(), teacher, 0)?;
    let norm = teacher.frobenius_norm();
    let scale = if norm > 0.0 { norm } else { 1.0 };
    let mut opt = RAdam::new(0.0);
    for it in 0..cfg.iters {
        let w = generate(&p, None)?.kernel;
        let diff = w.sub(teacher)?;
        let loss = diff.frobenius_sq();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                what: "projection loss is not finite".into(),
            });
        }
        if loss.sqrt() / scale <= cfg.tolerance {
            return finish(p, teacher, it);
        }
        let grads = crate::generator::generation_gradients(&p, &diff.scaled(2.0))?;
        let g: Vec<&[f64]> = grads.factors().map(|m| m.data()).collect();
        let mut params: Vec<&mut [f64]> = p.factors_mut().map(|m| m.data_mut()).collect();
        opt.step(&mut params, &g, cfg.lr_at(it))?;
    }
    let end = finish(p, teacher, cfg.iters)?;
    Ok(if end.residual <= start.residual { end } else { InitResult { iterations: cfg.iters, ..start } })
}

/// Rank-`r` split `A ~ (U S^1/2)(S^1/2 V^T)`.
fn truncated_split(a: &DenseMatrix, r: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let d = svd(a)?;
    let root: Vec<f64> = d.s.iter().take(r).map(|s| s.sqrt()).collect();
    let left = DenseMatrix::from_fn(a.rows(), r, |i, j| d.u.get(i, j) * root[j]);
    let right = DenseMatrix::from_fn(r, a.cols(), |i, j| root[i] * d.vt.get(i, j));
    Ok((left, right))
}

/// Truncated-SVD factors: rank-`B_c` split of the kernel, then a rank-`B_i`
/// split of every `C_i x k^2` basis kernel.
pub fn svd_init(teacher: &DenseMatrix, dims: KernelDims, bi: usize, bc: usize) -> Result<InitResult> {
    check_teacher(teacher, dims)?;
    let card = validate_cardinality(dims, bi, bc)?;
    let (cross, wc) = if card.cross {
        let (v, wc) = truncated_split(teacher, card.bc)?;
        (Some(v), wc)
    } else {
        (None, teacher.clone())
    };
    let mut basis = Vec::new();
    let mut coeff = Vec::new();
    for i in 0..wc.rows() {
        let slice = DenseMatrix::new(dims.c_in, dims.k2(), wc.row(i).to_vec())?;
        if card.intra {
            let (u, b) = truncated_split(&slice, card.bi)?;
            coeff.push(u);
            basis.push(b);
        } else {
            coeff.push(slice);
        }
    }
    finish(GeneratorParams::new(dims, card, basis, coeff, cross)?, teacher, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::generate_kernel;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn zero_teacher_is_immediate() {
        let dims = KernelDims::new(8, 4, 3);
        let t = DenseMatrix::zeros(8, 36);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let r = l2_project_init(&t, dims, 2, 3, &L2InitConfig::default(), &mut rng).unwrap();
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn both_skipped_copies_teacher() {
        let dims = KernelDims::new(4, 3, 3);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let t = DenseMatrix::from_fn(4, 27, |_, _| rng.gen_range(-1.0..1.0));
        let r = l2_project_init(&t, dims, 9, 4, &L2InitConfig::default(), &mut rng).unwrap();
        assert_eq!(r.residual, 0.0);
        assert_eq!(generate_kernel(&r.params, None).unwrap(), t);
        assert_eq!(r.params.coeff.len(), 4);
    }

    #[test]
    fn svd_exact_on_low_rank_teacher() {
        let dims = KernelDims::new(16, 8, 3);
        let card = validate_cardinality(dims, 8, 5).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let planted = GeneratorParams::random(dims, card, &mut rng);
        let t = generate_kernel(&planted, None).unwrap();
        let r = svd_init(&t, dims, 8, 5).unwrap();
        assert!(r.relative_residual < 1e-9, "{}", r.relative_residual);
    }

    #[test]
    fn svd_cross_residual_is_tail_energy() {
        let dims = KernelDims::new(6, 2, 3);
        let sig = [5.0, 4.0, 3.0, 2.0, 1.0, 0.5];
        let t = DenseMatrix::from_fn(6, 18, |i, j| if i == j { sig[i] } else { 0.0 });
        let r = svd_init(&t, dims, 9, 3).unwrap();
        let tail: f64 = sig[3..].iter().map(|s| s * s).sum();
        assert!((r.residual * r.residual - tail).abs() < 1e-9);
    }
}
