//! Mini-batch training loop for teachers and distilled students.

use std::path::Path;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::generator::QuantConfig;
use crate::tensor::DenseMatrix;

use super::init::{InitResult, L2InitConfig};
use super::loss::{correct, kd_loss, DistillConfig};
use super::model::{ArchSpec, ConvNet, StudentInit};
use super::radam::RAdam;

/// Optimizer schedule and batching.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Learning rate multiplier per epoch.
    pub lr_decay: f64,
    pub seed: u64,
    /// Samples per inference chunk during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.002,
            weight_decay: 5e-4,
            lr_decay: 0.98,
            seed: 0,
            eval_chunk: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.eval_chunk == 0 {
            return bad("eval_chunk", "must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be a positive number");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must be in (0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// One row of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean distillation (or cross-entropy) loss over the epoch's samples.
    pub loss_kd: f64,
    /// Mean orthogonality penalty over the epoch's steps, unweighted.
    pub loss_ort: f64,
    /// Accuracy of the training-mode logits seen during the epoch.
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Model, optimizer moments and counters: everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ConvNet,
    pub opt: RAdam,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: ConvNet, cfg: &TrainConfig) -> Self {
        Self {
            model,
            opt: RAdam::new(cfg.weight_decay),
            epoch: 0,
            seed: cfg.seed,
        }
    }
}

/// Student shape, precision and initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub bi: usize,
    pub bc: usize,
    pub quant: Option<QuantConfig>,
    pub act_bits: Option<u32>,
    pub init: StudentInit,
    pub l2: L2InitConfig,
}

impl StudentConfig {
    pub fn new(bi: usize, bc: usize, init: StudentInit) -> Self {
        Self {
            bi,
            bc,
            quant: None,
            act_bits: None,
            init,
            l2: L2InitConfig::default(),
        }
    }
}

/// Accuracy of inference-mode predictions.
pub fn evaluate(model: &ConvNet, ds: &LabeledDataset, chunk: usize) -> Result<f64> {
    let logits = model.predict(&ds.images, chunk)?;
    Ok(correct(&logits, &ds.labels) as f64 / ds.len().max(1) as f64)
}

fn rows(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    DenseMatrix::new(idx.len(), m.cols(), data).expect("row selection")
}

/// Trains `state` until `cfg.epochs` epochs are complete.
///
/// `teacher_logits` holds one row per training sample and is required when
/// `distill.beta > 0`. Every step minimizes `L_KD + lambda L_ort` on the
/// factors, batch norm and classifier. On a non-finite loss the step is
/// abandoned and [`Error::Diverged`] returned, leaving `state` at its last
/// finite values. `on_epoch` runs after each epoch (for logging or
/// checkpointing) and may abort the run by returning an error.
pub fn fit(
    state: &mut TrainState,
    train: &LabeledDataset,
    test: &LabeledDataset,
    teacher_logits: Option<&DenseMatrix>,
    distill: &DistillConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    distill.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidDims("empty training set".into()));
    }
    match teacher_logits {
        Some(t) if t.rows() != train.len() || t.cols() != state.model.arch.classes => {
            return Err(crate::error::shape_err(
                "teacher logits",
                format!("{}x{}", t.rows(), t.cols()),
                format!("{}x{}", train.len(), state.model.arch.classes),
            ))
        }
        None if distill.beta > 0.0 => {
            return Err(Error::Config {
                field: "beta".into(),
                reason: "distillation needs teacher logits".into(),
            })
        }
        _ => {}
    }
    let mut log = Vec::new();
    let mut step = 0usize;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        let (mut kd_sum, mut ort_sum, mut hits, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for idx in batches(train.len(), cfg.batch_size, state.seed, epoch as u64)? {
            let x = train.images.select(&idx);
            let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            let saved_bn = state.model.bns.clone();
            let (logits, cache) = state.model.forward_train(&x)?;
            let diverged = |what: String| Error::Diverged { iteration: step, what };
            if !logits.is_finite() {
                state.model.bns = saved_bn;
                return Err(diverged(format!("non-finite logits in epoch {epoch}")));
            }
            let teacher = match teacher_logits {
                Some(t) => rows(t, &idx),
                None => logits.clone(),
            };
            let loss = kd_loss(&logits, &teacher, &labels, distill)?;
            let mut grads = state.model.backward(&cache, &loss.grad)?;
            let (ort, ort_grads) = state.model.ortho()?;
            if !loss.value.is_finite() || !ort.is_finite() {
                state.model.bns = saved_bn;
                return Err(diverged(format!("loss {} ortho {} in epoch {epoch}", loss.value, ort)));
            }
            if distill.lambda > 0.0 {
                for (g, o) in grads.convs.iter_mut().zip(&ort_grads) {
                    for (gm, om) in g.factors_mut().zip(o.factors()) {
                        for (a, b) in gm.data_mut().iter_mut().zip(om.data()) {
                            *a += distill.lambda * b;
                        }
                    }
                }
            }
            let gs = grads.slices();
            if gs.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                state.model.bns = saved_bn;
                return Err(diverged(format!("non-finite gradient in epoch {epoch}")));
            }
            state.opt.step(&mut state.model.param_slices_mut(), &gs, lr)?;
            kd_sum += loss.value * idx.len() as f64;
            ort_sum += ort;
            hits += correct(&logits, &labels);
            steps += 1;
            step += 1;
        }
        state.epoch += 1;
        let m = EpochMetrics {
            epoch: state.epoch,
            lr,
            loss_kd: kd_sum / train.len() as f64,
            loss_ort: ort_sum / steps as f64,
            train_acc: hits as f64 / train.len() as f64,
            test_acc: evaluate(&state.model, test, cfg.eval_chunk)?,
        };
        on_epoch(&m, state)?;
        log.push(m);
    }
    Ok(log)
}

/// Seed of the model initialization stream, kept apart from the shuffle seed.
fn init_rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_add(0x5EED_1A17))
}

/// Untrained dense network as [`train_teacher`] starts it.
pub fn build_teacher(arch: ArchSpec, seed: u64) -> Result<ConvNet> {
    ConvNet::dense(arch, &mut init_rng(seed))
}

/// Fresh dense network trained with plain cross-entropy.
pub fn train_teacher(
    arch: ArchSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let mut state = TrainState::new(build_teacher(arch, cfg.seed)?, cfg);
    let log = fit(&mut state, train, test, None, &DistillConfig::cross_entropy(), cfg, on_epoch)?;
    Ok((state, log))
}

/// Student network for `teacher` before any training.
pub fn build_student(teacher: &ConvNet, scfg: &StudentConfig, seed: u64) -> Result<(ConvNet, Vec<InitResult>)> {
    if let Some(q) = &scfg.quant {
        q.check_quantizable()?;
    }
    if let Some(b) = scfg.act_bits {
        crate::quant::check_bits(b)?;
    }
    let (mut model, fits) = ConvNet::student(teacher, scfg.bi, scfg.bc, scfg.init, &scfg.l2, &mut init_rng(seed))?;
    model.quant = scfg.quant;
    model.act_bits = scfg.act_bits;
    Ok((model, fits))
}

/// Result of [`train_student`].
#[derive(Clone, Debug)]
pub struct StudentRun {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    pub init: Vec<InitResult>,
}

/// Builds a student from `teacher` and distills it.
///
/// The teacher's inference logits on `train` are computed once unless
/// supplied, so several students can share them.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    teacher: &ConvNet,
    teacher_logits: Option<&DenseMatrix>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    scfg: &StudentConfig,
    distill: &DistillConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<StudentRun> {
    let (model, init) = build_student(teacher, scfg, cfg.seed)?;
    let owned;
    let logits = match teacher_logits {
        Some(t) => Some(t),
        None if distill.beta > 0.0 => {
            owned = teacher.predict(&train.images, cfg.eval_chunk)?;
            Some(&owned)
        }
        None => None,
    };
    let mut state = TrainState::new(model, cfg);
    let metrics = fit(&mut state, train, test, logits, distill, cfg, on_epoch)?;
    Ok(StudentRun { state, metrics, init })
}

/// Metric log as CSV with columns `epoch,lr,loss_kd,loss_ort,train_acc,test_acc`.
pub fn metrics_csv(log: &[EpochMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in log {
        w.serialize(m).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_metrics_csv(log: &[EpochMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(log)?)?;
    Ok(())
}

fn csv_err(e: impl Into<std::io::Error>) -> Error {
    Error::Io(e.into())
}
