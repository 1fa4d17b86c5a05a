//! Two-level in situ kernel generation.
//!
//! `W = V * stack_i(U_i * W_i^b)`: the intra-kernel level builds each of the
//! `B_c` basis kernels from a `B_i`-row channel basis, the cross-kernel level
//! mixes the basis kernels into all `C_o` output kernels.
//!
//! Either level can be skipped. A skipped intra level stores each basis
//! kernel slice (`C_i x k^2`) directly in place of `U_i`; a skipped cross
//! level has no `V` and exactly `C_o` slices.

mod container;
mod generate;

pub use container::{read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use generate::{
    generate, generate_kernel, generation_gradients, FactorGrads, Generation,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant;
use crate::tensor::DenseMatrix;

/// Shape of a square convolution kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDims {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl KernelDims {
    pub fn new(c_out: usize, c_in: usize, k: usize) -> Self {
        Self { c_out, c_in, k }
    }

    pub fn k2(&self) -> usize {
        self.k * self.k
    }

    /// Length of one flattened kernel, `C_i k^2`.
    pub fn row_len(&self) -> usize {
        self.c_in * self.k2()
    }

    /// `C_o C_i k^2`.
    pub fn numel(&self) -> usize {
        self.c_out * self.row_len()
    }
}

/// Normalized cardinalities with the skip decision for each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cardinality {
    pub bi: usize,
    pub bc: usize,
    pub intra: bool,
    pub cross: bool,
}

impl Cardinality {
    /// Number of generated basis kernels (`B_c`, or `C_o` with cross skipped).
    pub fn slices(&self, dims: &KernelDims) -> usize {
        if self.cross {
            self.bc
        } else {
            dims.c_out
        }
    }

    /// Both levels skipped: a plain dense kernel.
    pub fn dense(dims: &KernelDims) -> Self {
        Self {
            bi: dims.c_in,
            bc: dims.c_out,
            intra: false,
            cross: false,
        }
    }
}

/// Applies the skip rules to user-requested cardinalities.
///
/// Intra generation is skipped for `k == 1` or `B_i >= min(C_i, k^2)`
/// (`B_i` becomes `C_i`); cross generation is skipped for
/// `B_c >= min(C_o, C_i k^2)` (`B_c` becomes `C_o`).
pub fn validate_cardinality(dims: KernelDims, bi: usize, bc: usize) -> Result<Cardinality> {
    if dims.c_out == 0 || dims.c_in == 0 || dims.k == 0 {
        return Err(Error::InvalidDims(format!("kernel dims {dims:?} must be positive")));
    }
    if bi == 0 {
        return Err(Error::Cardinality("B_i > 0 required".into()));
    }
    if bc == 0 {
        return Err(Error::Cardinality("B_c > 0 required".into()));
    }
    let intra = dims.k > 1 && bi < dims.c_in.min(dims.k2());
    let cross = bc < dims.c_out.min(dims.row_len());
    Ok(Cardinality {
        bi: if intra { bi } else { dims.c_in },
        bc: if cross { bc } else { dims.c_out },
        intra,
        cross,
    })
}

/// Bitwidths of the three factor kinds and the dense reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub qb: u32,
    pub qu: u32,
    pub qv: u32,
    pub qw: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            qb: 16,
            qu: 16,
            qv: 16,
            qw: 16,
        }
    }
}

impl QuantConfig {
    pub fn new(qb: u32, qu: u32, qv: u32, qw: u32) -> Result<Self> {
        let c = Self { qb, qu, qv, qw };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("q_b", self.qb), ("q_u", self.qu), ("q_v", self.qv), ("q_w", self.qw)] {
            if !(1..=32).contains(&bits) {
                return Err(Error::Config {
                    field: name.into(),
                    reason: format!("bitwidth {bits} outside [1, 32]"),
                });
            }
        }
        Ok(())
    }

    /// Factor bitwidths usable by the fake quantizer.
    pub fn check_quantizable(&self) -> Result<()> {
        quant::check_bits(self.qb)?;
        quant::check_bits(self.qu)?;
        quant::check_bits(self.qv)
    }
}

/// Factor set of one generated convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub dims: KernelDims,
    pub card: Cardinality,
    /// `W_i^b`, each `B_i x k^2`; empty when intra generation is skipped.
    pub basis: Vec<DenseMatrix>,
    /// `U_i`, each `C_i x B_i`; the `C_i x k^2` slice itself when intra is skipped.
    pub coeff: Vec<DenseMatrix>,
    /// `V`, `C_o x B_c`; absent when cross generation is skipped.
    pub cross: Option<DenseMatrix>,
}

impl GeneratorParams {
    pub fn new(
        dims: KernelDims,
        card: Cardinality,
        basis: Vec<DenseMatrix>,
        coeff: Vec<DenseMatrix>,
        cross: Option<DenseMatrix>,
    ) -> Result<Self> {
        let p = Self {
            dims,
            card,
            basis,
            coeff,
            cross,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks cardinality inequalities and every factor shape.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let c = &self.card;
        if c.intra {
            if d.k == 1 {
                return Err(Error::Cardinality("intra generation requires k > 1".into()));
            }
            if !(c.bi > 0 && c.bi < d.c_in.min(d.k2())) {
                return Err(Error::Cardinality(format!(
                    "0 < B_i < min(C_i, k^2) violated: B_i = {}, C_i = {}, k^2 = {}",
                    c.bi,
                    d.c_in,
                    d.k2()
                )));
            }
        } else if c.bi != d.c_in {
            return Err(Error::Cardinality(format!(
                "skipped intra level needs B_i == C_i, got B_i = {} and C_i = {}",
                c.bi, d.c_in
            )));
        }
        if c.cross {
            if !(c.bc > 0 && c.bc < d.c_out.min(d.row_len())) {
                return Err(Error::Cardinality(format!(
                    "0 < B_c < min(C_o, C_i k^2) violated: B_c = {}, C_o = {}, C_i k^2 = {}",
                    c.bc,
                    d.c_out,
                    d.row_len()
                )));
            }
        } else if c.bc != d.c_out {
            return Err(Error::Cardinality(format!(
                "skipped cross level needs B_c == C_o, got B_c = {} and C_o = {}",
                c.bc, d.c_out
            )));
        }

        let slices = c.slices(d);
        let bad = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Err(crate::error::shape_err(
                "GeneratorParams",
                format!("{what} {}x{}", got.0, got.1),
                format!("expected {}x{}", want.0, want.1),
            ))
        };
        if self.coeff.len() != slices {
            return Err(Error::Cardinality(format!(
                "{} coefficient slices for {slices} basis kernels",
                self.coeff.len()
            )));
        }
        if c.intra {
            if self.basis.len() != slices {
                return Err(Error::Cardinality(format!(
                    "{} channel bases for {slices} basis kernels",
                    self.basis.len()
                )));
            }
            for b in &self.basis {
                if b.shape() != (c.bi, d.k2()) {
                    return bad("W^b", b.shape(), (c.bi, d.k2()));
                }
            }
            for u in &self.coeff {
                if u.shape() != (d.c_in, c.bi) {
                    return bad("U", u.shape(), (d.c_in, c.bi));
                }
            }
        } else {
            if !self.basis.is_empty() {
                return Err(Error::Cardinality("channel bases present with intra level skipped".into()));
            }
            for u in &self.coeff {
                if u.shape() != (d.c_in, d.k2()) {
                    return bad("kernel slice", u.shape(), (d.c_in, d.k2()));
                }
            }
        }
        match (&self.cross, c.cross) {
            (Some(v), true) if v.shape() != (d.c_out, c.bc) => bad("V", v.shape(), (d.c_out, c.bc)),
            (None, true) => Err(Error::Cardinality("cross level active but V missing".into())),
            (Some(_), false) => Err(Error::Cardinality("V stored with cross level skipped".into())),
            _ => Ok(()),
        }
    }

    /// Random factors with per-factor fan-in scaling.
    ///
    /// `Var(V) = 1/B_c`, `Var(U) = 1/B_i` and `Var(W^b) = 2/(C_i k^2)`, so the
    /// generated kernel has the variance of a Kaiming-initialized dense one.
    pub fn random(dims: KernelDims, card: Cardinality, rng: &mut impl Rng) -> Self {
        let uniform = |rng: &mut dyn rand::RngCore, r: usize, c: usize, var: f64| {
            let b = (3.0 * var).sqrt();
            DenseMatrix::from_fn(r, c, |_, _| rng.gen_range(-b..b))
        };
        let slices = card.slices(&dims);
        let dense_var = 2.0 / dims.row_len() as f64;
        let (basis, coeff) = if card.intra {
            let basis = (0..slices).map(|_| uniform(rng, card.bi, dims.k2(), dense_var)).collect();
            let coeff = (0..slices)
                .map(|_| uniform(rng, dims.c_in, card.bi, 1.0 / card.bi as f64))
                .collect();
            (basis, coeff)
        } else {
            (Vec::new(), (0..slices).map(|_| uniform(rng, dims.c_in, dims.k2(), dense_var)).collect())
        };
        let cross = card
            .cross
            .then(|| uniform(rng, dims.c_out, card.bc, 1.0 / card.bc as f64));
        Self {
            dims,
            card,
            basis,
            coeff,
            cross,
        }
    }

    /// Dense (both levels skipped) parameters holding `kernel` verbatim.
    pub fn from_dense(dims: KernelDims, kernel: &DenseMatrix) -> Result<Self> {
        if kernel.shape() != (dims.c_out, dims.row_len()) {
            return Err(crate::error::shape_err(
                "GeneratorParams::from_dense",
                format!("{}x{}", kernel.rows(), kernel.cols()),
                format!("{}x{}", dims.c_out, dims.row_len()),
            ));
        }
        let coeff = (0..dims.c_out)
            .map(|i| DenseMatrix::new(dims.c_in, dims.k2(), kernel.row(i).to_vec()).unwrap())
            .collect();
        Self::new(dims, Cardinality::dense(&dims), Vec::new(), coeff, None)
    }

    /// Stored scalar count.
    pub fn num_params(&self) -> usize {
        let b: usize = self.basis.iter().map(|m| m.data().len()).sum();
        let u: usize = self.coeff.iter().map(|m| m.data().len()).sum();
        b + u + self.cross.as_ref().map_or(0, |v| v.data().len())
    }

    /// Stored bits under `quant`.
    pub fn num_bits(&self, quant: &QuantConfig) -> u64 {
        let b: usize = self.basis.iter().map(|m| m.data().len()).sum();
        let u: usize = self.coeff.iter().map(|m| m.data().len()).sum();
        let v = self.cross.as_ref().map_or(0, |v| v.data().len());
        b as u64 * quant.qb as u64 + u as u64 * quant.qu as u64 + v as u64 * quant.qv as u64
    }

    /// Every factor in container order: bases, coefficients, then `V`.
    pub fn factors(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.basis.iter().chain(self.coeff.iter()).chain(self.cross.iter())
    }

    pub fn factors_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        self.basis.iter_mut().chain(self.coeff.iter_mut()).chain(self.cross.iter_mut())
    }
}

/// Scalars stored per layer after normalization.
pub fn param_count(dims: KernelDims, card: Cardinality) -> usize {
    let slice = if card.intra {
        card.bi * dims.k2() + dims.c_in * card.bi
    } else {
        dims.row_len()
    };
    let v = if card.cross { dims.c_out * card.bc } else { 0 };
    card.slices(&dims) * slice + v
}

/// Bits stored per layer; a skipped intra level stores its slices at `q_u`.
pub fn bit_count(dims: KernelDims, card: Cardinality, quant: &QuantConfig) -> u64 {
    let (qb, qu, qv) = (quant.qb as u64, quant.qu as u64, quant.qv as u64);
    let slice = if card.intra {
        (card.bi * dims.k2()) as u64 * qb + (dims.c_in * card.bi) as u64 * qu
    } else {
        dims.row_len() as u64 * qu
    };
    let v = if card.cross { (dims.c_out * card.bc) as u64 * qv } else { 0 };
    card.slices(&dims) as u64 * slice + v
}

/// Parameter compression ratio `r`.
///
/// With both levels active this is `(C_o + B_i k^2 + C_i B_i) B_c / (C_o C_i k^2)`.
pub fn param_ratio(c_out: usize, c_in: usize, k: usize, bi: usize, bc: usize) -> Result<f64> {
    let dims = KernelDims::new(c_out, c_in, k);
    let card = validate_cardinality(dims, bi, bc)?;
    Ok(param_count(dims, card) as f64 / dims.numel() as f64)
}

/// Memory compression ratio `r_m`.
pub fn memory_ratio(
    c_out: usize,
    c_in: usize,
    k: usize,
    bi: usize,
    bc: usize,
    quant: &QuantConfig,
) -> Result<f64> {
    quant.validate()?;
    let dims = KernelDims::new(c_out, c_in, k);
    let card = validate_cardinality(dims, bi, bc)?;
    Ok(bit_count(dims, card, quant) as f64 / (dims.numel() as u64 * quant.qw as u64) as f64)
}

/// Multiply-accumulate FLOPs of one generation, `2 B_c C_i B_i k^2 + 2 C_o B_c C_i k^2`
/// with both levels active; skipped levels cost nothing.
pub fn generation_flops(dims: KernelDims, card: Cardinality) -> u64 {
    let intra = if card.intra {
        2 * (card.bc * dims.c_in * card.bi * dims.k2()) as u64
    } else {
        0
    };
    let cross = if card.cross {
        2 * (dims.c_out * card.bc * dims.row_len()) as u64
    } else {
        0
    };
    intra + cross
}
