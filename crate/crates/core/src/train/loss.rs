//! Distillation loss with temperature-softened targets.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{shape_str, DenseMatrix};

/// Weights of the distillation objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Share of the soft-target term, in `[0, 1]`.
    pub beta: f64,
    /// Weight of the orthogonality penalty.
    pub lambda: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            beta: 0.9,
            lambda: 0.02,
        }
    }
}

impl DistillConfig {
    pub fn new(temperature: f64, beta: f64, lambda: f64) -> Result<Self> {
        let c = Self {
            temperature,
            beta,
            lambda,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.into(),
                reason,
            })
        };
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature", format!("must be > 0, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta", format!("must be in [0, 1], got {}", self.beta));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", format!("must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    /// Plain cross-entropy: no teacher, no penalty.
    pub fn cross_entropy() -> Self {
        Self {
            temperature: 1.0,
            beta: 0.0,
            lambda: 0.0,
        }
    }
}

/// Row-wise softmax of `logits / t`.
pub fn softmax(logits: &DenseMatrix, t: f64) -> DenseMatrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) / t).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    p
}

fn log_softmax_row(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|&v| ((v - m) / t).exp()).sum::<f64>().ln();
    row.iter().map(|&v| (v - m) / t - lse).collect()
}

/// Batch-mean loss and its gradient with respect to the student logits.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: DenseMatrix,
}

/// `beta T^2 KL(q_T || p_T) + (1 - beta) CE(y, p)`, averaged over the batch.
///
/// `p_T` and `q_T` are the temperature-`T` softmax of student and teacher
/// logits. The gradient is `(beta T (p_T - q_T) + (1 - beta)(p - onehot)) / n`.
pub fn kd_loss(
    student: &DenseMatrix,
    teacher: &DenseMatrix,
    labels: &[u8],
    cfg: &DistillConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if student.shape() != teacher.shape() {
        return Err(shape_err("kd_loss", shape_str(student), shape_str(teacher)));
    }
    if labels.len() != student.rows() {
        return Err(shape_err("kd_loss", shape_str(student), format!("{} labels", labels.len())));
    }
    if !student.is_finite() || !teacher.is_finite() {
        return Err(Error::NonFinite("kd_loss logits".into()));
    }
    let (n, classes) = student.shape();
    if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(Error::BadLabel {
            index: i,
            label: labels[i],
        });
    }
    let t = cfg.temperature;
    let (beta, nf) = (cfg.beta, n as f64);
    let mut grad = DenseMatrix::zeros(n, classes);
    let mut total = 0.0;
    for i in 0..n {
        let log_p = log_softmax_row(student.row(i), 1.0);
        let y = labels[i] as usize;
        let mut row_loss = (1.0 - beta) * -log_p[y];
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj = (1.0 - beta) * (log_p[j].exp() - onehot);
        }
        if beta > 0.0 {
            let log_pt = log_softmax_row(student.row(i), t);
            let log_qt = log_softmax_row(teacher.row(i), t);
            let mut kl = 0.0;
            for j in 0..classes {
                let q = log_qt[j].exp();
                if q > 0.0 {
                    kl += q * (log_qt[j] - log_pt[j]);
                }
                g[j] += beta * t * (log_pt[j].exp() - q);
            }
            row_loss += beta * t * t * kl;
        }
        total += row_loss;
        for gj in g.iter_mut() {
            *gj /= nf;
        }
    }
    Ok(LossOutput {
        value: total / nf,
        grad,
    })
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy(logits: &DenseMatrix, labels: &[u8]) -> f64 {
    correct(logits, labels) as f64 / labels.len().max(1) as f64
}

pub(crate) fn correct(logits: &DenseMatrix, labels: &[u8]) -> usize {
    (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == labels[i] as usize
        })
        .count()
}
