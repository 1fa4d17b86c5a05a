//! Design-space exploration: kernel correlation, cardinality and bitwidth
//! sweeps, and Pareto extraction.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{shape_err, Error, Result};
use crate::generator::{bit_count, param_count, validate_cardinality, KernelDims, QuantConfig};
use crate::tensor::{shape_str, singular_values, DenseMatrix};
use crate::train::{train_student, ArchSpec, ConvNet, DistillConfig, StudentConfig, TrainConfig};

/// Share of singular values counted as "top".
pub const TOP_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// Per-kernel `C_i x k^2` slices, averaged over the `C_o` kernels.
    Intra,
    /// The whole `C_o x C_i k^2` matrix.
    Cross,
}

/// Correlation metric with its spread across kernels (zero in cross mode).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub mean: f64,
    /// Population standard deviation over kernels.
    pub std: f64,
    pub count: usize,
}

/// `sum of the top ceil(0.3 n) singular values / sum of all n`.
pub fn top_singular_mass(m: &DenseMatrix) -> Result<f64> {
    let s = singular_values(m)?;
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("correlation of an all-zero matrix".into()));
    }
    let top = (TOP_FRACTION * s.len() as f64).ceil() as usize;
    Ok(s[..top.max(1)].iter().sum::<f64>() / total)
}

/// Low-rank structure of a `C_o x C_i k^2` kernel matrix: values near 1 mean
/// a few directions carry most of the energy. Intra mode rejects `k = 1`
/// (a `C_i x 1` slice has a single singular value).
pub fn kernel_correlation(kernel: &DenseMatrix, dims: KernelDims, mode: CorrelationMode) -> Result<Correlation> {
    if kernel.shape() != (dims.c_out, dims.row_len()) {
        return Err(shape_err(
            "kernel_correlation",
            shape_str(kernel),
            format!("{}x{}", dims.c_out, dims.row_len()),
        ));
    }
    match mode {
        CorrelationMode::Cross => Ok(Correlation {
            mean: top_singular_mass(kernel)?,
            std: 0.0,
            count: 1,
        }),
        CorrelationMode::Intra => {
            if dims.k == 1 {
                return Err(Error::InvalidDims("intra-kernel correlation skips 1x1 convolutions".into()));
            }
            let vals = (0..dims.c_out)
                .map(|o| top_singular_mass(&DenseMatrix::new(dims.c_in, dims.k2(), kernel.row(o).to_vec())?))
                .collect::<Result<Vec<_>>>()?;
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Ok(Correlation {
                mean,
                std: var.sqrt(),
                count: vals.len(),
            })
        }
    }
}

/// One evaluated setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationPoint {
    pub bi: usize,
    pub bc: usize,
    pub qb: u32,
    pub qu: u32,
    pub qv: u32,
    /// Network parameter ratio: generated scalars over dense scalars.
    pub r: f64,
    /// Network memory ratio: generated bits over dense bits at `q_w`.
    pub r_m: f64,
    pub accuracy: f64,
    /// Wall-clock seconds spent training and evaluating the point.
    pub runtime: f64,
    /// Small `B_i` with medium `B_c` in every layer.
    pub heuristic: bool,
}

/// Network-wide `(r, r_m)` of a uniform `(B_i, B_c)` setting: factor totals
/// over all convolutions divided by the dense totals. Each layer clamps the
/// cardinalities to its own shape first.
pub fn network_ratios(arch: &ArchSpec, bi: usize, bc: usize, quant: &QuantConfig) -> Result<(f64, f64)> {
    quant.validate()?;
    let (mut p, mut dense, mut bits) = (0usize, 0usize, 0u64);
    for d in arch.kernel_dims() {
        let card = validate_cardinality(d, bi, bc)?;
        p += param_count(d, card);
        bits += bit_count(d, card, quant);
        dense += d.numel();
    }
    Ok((p as f64 / dense as f64, bits as f64 / (dense as u64 * quant.qw as u64) as f64))
}

/// `B_i <= 3` and `B_c` within `[0.25, 0.5] * min(C_o, C_i k^2)`.
pub fn heuristic_preferred(dims: KernelDims, bi: usize, bc: usize) -> bool {
    let cap = dims.c_out.min(dims.row_len()) as f64;
    bi <= 3 && (0.25 * cap..=0.5 * cap).contains(&(bc as f64))
}

/// Sweep axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub bi: Vec<usize>,
    pub bc: Vec<usize>,
    /// `(q_b, q_u, q_v)` tuples.
    pub bits: Vec<[u32; 3]>,
    /// Bitwidth of the dense reference weights.
    pub qw: u32,
    /// Train with fake-quantized factors; otherwise bitwidths only enter `r_m`.
    pub fake_quant: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bi: vec![1, 2, 4, 8],
            bc: vec![4, 8, 16, 32],
            bits: vec![[16, 16, 16]],
            qw: 16,
            fake_quant: false,
        }
    }
}

/// A setting left out of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSetting {
    pub bi: usize,
    pub bc: usize,
    pub bits: [u32; 3],
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub points: Vec<ExplorationPoint>,
    pub skipped: Vec<SkippedSetting>,
    /// Cardinality normalizations applied per setting and layer.
    pub notes: Vec<String>,
}

fn normalization_notes(arch: &ArchSpec, bi: usize, bc: usize) -> Result<Vec<String>> {
    let mut notes = Vec::new();
    for (l, d) in arch.kernel_dims().into_iter().enumerate() {
        let card = validate_cardinality(d, bi, bc)?;
        if !card.intra {
            notes.push(format!(
                "(B_i={bi}, B_c={bc}) conv{l}: intra level skipped (min(C_i, k^2) = {})",
                d.c_in.min(d.k2())
            ));
        }
        if !card.cross {
            notes.push(format!(
                "(B_i={bi}, B_c={bc}) conv{l}: cross level skipped (min(C_o, C_i k^2) = {})",
                d.c_out.min(d.row_len())
            ));
        }
    }
    Ok(notes)
}

/// Trains one student per `(B_i, B_c, bits)` setting from the shared
/// `teacher` and records accuracy and ratios. Every point uses `cfg.seed`
/// and `cfg.epochs` (the per-point budget), so a point is reproducible on
/// its own. Invalid settings are skipped with a reason; `on_point` sees
/// each finished point.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    teacher: &ConvNet,
    teacher_logits: Option<&DenseMatrix>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    spec: &GridSpec,
    student: &StudentConfig,
    distill: &DistillConfig,
    cfg: &TrainConfig,
    mut on_point: impl FnMut(&ExplorationPoint),
) -> Result<GridResult> {
    if spec.bi.is_empty() || spec.bc.is_empty() || spec.bits.is_empty() {
        return Err(Error::Config {
            field: "grid".into(),
            reason: "B_i, B_c and bits lists must be nonempty".into(),
        });
    }
    let owned;
    let logits = match teacher_logits {
        Some(t) => Some(t),
        None if distill.beta > 0.0 => {
            owned = teacher.predict(&train.images, cfg.eval_chunk)?;
            Some(&owned)
        }
        None => None,
    };
    let arch = &teacher.arch;
    let mut out = GridResult::default();
    for &bits in &spec.bits {
        for &bi in &spec.bi {
            for &bc in &spec.bc {
                let skip = |reason: String| SkippedSetting { bi, bc, bits, reason };
                let quant = match QuantConfig::new(bits[0], bits[1], bits[2], spec.qw) {
                    Ok(q) => q,
                    Err(e) => {
                        out.skipped.push(skip(e.to_string()));
                        continue;
                    }
                };
                let (r, r_m) = match network_ratios(arch, bi, bc, &quant) {
                    Ok(v) => v,
                    Err(e) => {
                        out.skipped.push(skip(e.to_string()));
                        continue;
                    }
                };
                if spec.fake_quant {
                    if let Err(e) = quant.check_quantizable() {
                        out.skipped.push(skip(e.to_string()));
                        continue;
                    }
                }
                out.notes.extend(normalization_notes(arch, bi, bc)?);
                let scfg = StudentConfig {
                    bi,
                    bc,
                    quant: spec.fake_quant.then_some(quant),
                    ..*student
                };
                let start = Instant::now();
                let run = train_student(teacher, logits, train, test, &scfg, distill, cfg, |_, _| Ok(()))?;
                let accuracy = run.metrics.last().map_or_else(
                    || crate::train::evaluate(&run.state.model, test, cfg.eval_chunk),
                    |m| Ok(m.test_acc),
                )?;
                let point = ExplorationPoint {
                    bi,
                    bc,
                    qb: bits[0],
                    qu: bits[1],
                    qv: bits[2],
                    r,
                    r_m,
                    accuracy,
                    runtime: start.elapsed().as_secs_f64(),
                    heuristic: arch.kernel_dims().into_iter().all(|d| heuristic_preferred(d, bi, bc)),
                };
                on_point(&point);
                out.points.push(point);
            }
        }
    }
    Ok(out)
}

fn dominates(a: &ExplorationPoint, b: &ExplorationPoint) -> bool {
    a.r_m <= b.r_m && a.accuracy >= b.accuracy && (a.r_m < b.r_m || a.accuracy > b.accuracy)
}

/// Points not dominated in (lower `r_m`, higher accuracy), ordered by `r_m`
/// with ties kept in input order.
pub fn pareto_front(points: &[ExplorationPoint]) -> Vec<ExplorationPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].r_m.total_cmp(&points[b].r_m).then(a.cmp(&b)));
    let mut front: Vec<ExplorationPoint> = Vec::new();
    for &i in &order {
        let p = &points[i];
        // anything earlier has r_m <= p.r_m, so only earlier points can dominate
        if !order.iter().any(|&j| j != i && dominates(&points[j], p)) {
            front.push(p.clone());
        }
    }
    front
}

/// Contour grid as CSV with columns `B_i,B_c,q_b,q_u,q_v,r,r_m,acc`.
pub fn contour_csv(points: &[ExplorationPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["B_i", "B_c", "q_b", "q_u", "q_v", "r", "r_m", "acc"]).map_err(io)?;
    for p in points {
        w.write_record([
            p.bi.to_string(),
            p.bc.to_string(),
            p.qb.to_string(),
            p.qu.to_string(),
            p.qv.to_string(),
            p.r.to_string(),
            p.r_m.to_string(),
            p.accuracy.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
