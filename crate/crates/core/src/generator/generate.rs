use super::{GeneratorParams, QuantConfig};
use crate::error::{shape_err, Result};
use crate::quant;
use crate::tensor::{gemm, gemm_into, shape_str, DenseMatrix};

/// Result of one forward generation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Generation {
    /// Generated kernel, `C_o x C_i k^2`.
    pub kernel: DenseMatrix,
    /// Basis kernels `W_c`, one flattened slice per row.
    pub wc: DenseMatrix,
    /// The factors that entered the products (quantized copies when quantizing).
    pub effective: GeneratorParams,
    /// Per-tensor scales of (bases, coefficients, V) when quantized.
    pub scales: Option<[f64; 3]>,
}

/// Gradients with the same layout as [`GeneratorParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrads {
    pub basis: Vec<DenseMatrix>,
    pub coeff: Vec<DenseMatrix>,
    pub cross: Option<DenseMatrix>,
}

impl FactorGrads {
    pub fn zeros_like(p: &GeneratorParams) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            basis: p.basis.iter().map(z).collect(),
            coeff: p.coeff.iter().map(z).collect(),
            cross: p.cross.as_ref().map(z),
        }
    }

    pub fn factors(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.basis.iter().chain(self.coeff.iter()).chain(self.cross.iter())
    }

    pub fn factors_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        self.basis.iter_mut().chain(self.coeff.iter_mut()).chain(self.cross.iter_mut())
    }
}

fn quantized(p: &GeneratorParams, q: &QuantConfig) -> Result<(GeneratorParams, [f64; 3])> {
    q.check_quantizable()?;
    let mut out = p.clone();
    let mut scales = [1.0; 3];
    if !p.basis.is_empty() {
        let (b, s) = quant::fake_quantize_group(&p.basis, q.qb)?;
        out.basis = b;
        scales[0] = s;
    }
    let (u, s) = quant::fake_quantize_group(&p.coeff, q.qu)?;
    out.coeff = u;
    scales[1] = s;
    if let Some(v) = &p.cross {
        let view = quant::fake_quantize(v, q.qv)?;
        scales[2] = view.scale;
        out.cross = Some(view.values);
    }
    Ok((out, scales))
}

fn basis_kernels(p: &GeneratorParams) -> DenseMatrix {
    let d = &p.dims;
    let slices = p.card.slices(d);
    let row_len = d.row_len();
    let mut wc = DenseMatrix::zeros(slices, row_len);
    for i in 0..slices {
        let dst = wc.row_mut(i);
        if p.card.intra {
            gemm_into(d.c_in, p.card.bi, d.k2(), p.coeff[i].data(), p.basis[i].data(), dst);
        } else {
            dst.copy_from_slice(p.coeff[i].data());
        }
    }
    wc
}

/// Runs both generation levels, fake-quantizing factors first if `quant` is given.
pub fn generate(p: &GeneratorParams, quant: Option<&QuantConfig>) -> Result<Generation> {
    p.validate()?;
    let (effective, scales) = match quant {
        Some(q) => {
            let (e, s) = quantized(p, q)?;
            (e, Some(s))
        }
        None => (p.clone(), None),
    };
    let wc = basis_kernels(&effective);
    let kernel = match &effective.cross {
        Some(v) => gemm(v, &wc)?,
        None => wc.clone(),
    };
    Ok(Generation {
        kernel,
        wc,
        effective,
        scales,
    })
}

/// `V * stack_i(U_i * W_i^b)` as a `C_o x C_i k^2` matrix.
pub fn generate_kernel(p: &GeneratorParams, quant: Option<&QuantConfig>) -> Result<DenseMatrix> {
    Ok(generate(p, quant)?.kernel)
}

fn chain_rule(p: &GeneratorParams, wc: &DenseMatrix, dl_dw: &DenseMatrix) -> Result<FactorGrads> {
    let d = &p.dims;
    if dl_dw.shape() != (d.c_out, d.row_len()) {
        return Err(shape_err(
            "generation_gradients",
            shape_str(dl_dw),
            format!("{}x{}", d.c_out, d.row_len()),
        ));
    }
    let (cross, dwc) = match &p.cross {
        Some(v) => (Some(gemm(dl_dw, &wc.transpose())?), gemm(&v.transpose(), dl_dw)?),
        None => (None, dl_dw.clone()),
    };
    let slices = p.card.slices(d);
    let mut basis = Vec::with_capacity(p.basis.len());
    let mut coeff = Vec::with_capacity(slices);
    for i in 0..slices {
        let g = DenseMatrix::new(d.c_in, d.k2(), dwc.row(i).to_vec())?;
        if p.card.intra {
            coeff.push(gemm(&g, &p.basis[i].transpose())?);
            basis.push(gemm(&p.coeff[i].transpose(), &g)?);
        } else {
            coeff.push(g);
        }
    }
    Ok(FactorGrads { basis, coeff, cross })
}

/// Gradients of every factor given `dL/dW`, unquantized chain.
pub fn generation_gradients(p: &GeneratorParams, dl_dw: &DenseMatrix) -> Result<FactorGrads> {
    p.validate()?;
    chain_rule(p, &basis_kernels(p), dl_dw)
}

impl Generation {
    /// Gradients with respect to the master factors `p`: chain rule through the
    /// effective factors, then the clipped straight-through estimator.
    pub fn backward(&self, p: &GeneratorParams, dl_dw: &DenseMatrix) -> Result<FactorGrads> {
        let mut g = chain_rule(&self.effective, &self.wc, dl_dw)?;
        if let Some([sb, su, sv]) = self.scales {
            for (gb, b) in g.basis.iter_mut().zip(&p.basis) {
                *gb = quant::ste_backward(gb, b, sb)?;
            }
            for (gu, u) in g.coeff.iter_mut().zip(&p.coeff) {
                *gu = quant::ste_backward(gu, u, su)?;
            }
            if let (Some(gv), Some(v)) = (g.cross.as_mut(), p.cross.as_ref()) {
                *gv = quant::ste_backward(gv, v, sv)?;
            }
        }
        Ok(g)
    }
}
