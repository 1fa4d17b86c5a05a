//! Command execution.
//!
//! Artifacts are written to a hidden staging directory next to `out` and
//! moved into place only when the whole set is complete, so a failed run
//! leaves nothing behind. An existing non-empty `out` is never touched.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use tempfile::TempDir;

use insitu_core::cost::{speedup_report, LayerSpec};
use insitu_core::data::{self, LabeledDataset, Split};
use insitu_core::explore::{contour_csv, grid_search, kernel_correlation, pareto_front, Correlation, CorrelationMode};
use insitu_core::generator::{write_container, KernelDims};
use insitu_core::train::{
    build_student, build_teacher, fit, read_checkpoint, svd_init, write_checkpoint, write_metrics_csv, ConvNet,
    DistillConfig, EpochMetrics, InitResult, StudentConfig, StudentInit, TrainConfig, TrainState,
};
use insitu_core::{DenseMatrix, Error as CoreError};

use crate::config::{Command, RunConfig, Target};

pub const SNAPSHOT: &str = "config.toml";
pub const DIVERGED: &str = "diverged.ckpt";

/// Staging area that becomes `out` on [`Staging::commit`] and vanishes on drop.
pub struct Staging {
    dir: TempDir,
    out: PathBuf,
}

fn ensure_free(out: &Path) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            bail!("invalid config field `out`: {} exists and is not a directory", out.display());
        }
        if fs::read_dir(out)?.next().is_some() {
            bail!(
                "invalid config field `out`: {} already holds files; refusing to overwrite",
                out.display()
            );
        }
    }
    Ok(())
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self> {
        ensure_free(out)?;
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let dir = tempfile::Builder::new()
            .prefix(".insitu-stage-")
            .tempdir_in(parent)
            .with_context(|| format!("creating a staging directory in {}", parent.display()))?;
        Ok(Self {
            dir,
            out: out.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {name}"))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Moves the staged artifacts to `out`; returns their final paths.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        ensure_free(&self.out)?;
        let mut names: Vec<_> = fs::read_dir(self.dir.path())?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(self.dir.path(), fs::Permissions::from_mode(0o755))?;
        }
        if self.out.exists() {
            fs::remove_dir(&self.out)?;
        }
        let staged = self.dir.keep();
        if let Err(e) = fs::rename(&staged, &self.out) {
            let _ = fs::remove_dir_all(&staged);
            return Err(e).with_context(|| format!("moving artifacts to {}", self.out.display()));
        }
        Ok(names.into_iter().map(|n| self.out.join(n)).collect())
    }
}

/// Train and test splits, loaded on first use.
struct Data<'a> {
    cfg: &'a RunConfig,
    sets: Option<(LabeledDataset, LabeledDataset)>,
}

impl<'a> Data<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        Self { cfg, sets: None }
    }

    fn get(&mut self) -> Result<&(LabeledDataset, LabeledDataset)> {
        if self.sets.is_none() {
            let d = &self.cfg.data;
            let dir = d.dir.clone().unwrap_or_else(data::data_dir);
            let load = |split, per_class: Option<usize>| -> Result<LabeledDataset> {
                let ds = data::load_split(&dir, split).with_context(|| {
                    format!(
                        "loading {split:?} split from {} (set data.dir, --data-dir or {})",
                        dir.display(),
                        data::DATA_DIR_ENV
                    )
                })?;
                Ok(match per_class {
                    Some(n) => ds.balanced_prefix(n)?,
                    None => ds,
                })
            };
            let train = load(Split::Train, d.train_per_class)?;
            let test = load(Split::Test, d.test_per_class)?;
            eprintln!("data: {} training and {} test samples from {}", train.len(), test.len(), dir.display());
            self.sets = Some((train, test));
        }
        Ok(self.sets.as_ref().expect("loaded above"))
    }
}

fn log_epoch(tag: &str, total: usize, m: &EpochMetrics) {
    eprintln!(
        "{tag} epoch {}/{total}: lr {:.6} loss_kd {:.4} loss_ort {:.4} train_acc {:.4} test_acc {:.4}",
        m.epoch, m.lr, m.loss_kd, m.loss_ort, m.train_acc, m.test_acc
    );
}

/// Runs [`fit`]; on divergence the last finite state is saved to `out`.
#[allow(clippy::too_many_arguments)]
fn fit_or_snapshot(
    cfg: &RunConfig,
    tag: &str,
    state: &mut TrainState,
    train: &LabeledDataset,
    test: &LabeledDataset,
    teacher_logits: Option<&DenseMatrix>,
    distill: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    match fit(state, train, test, teacher_logits, distill, tcfg, |m, _| {
        log_epoch(tag, tcfg.epochs, m);
        Ok(())
    }) {
        Ok(log) => Ok(log),
        Err(e @ CoreError::Diverged { .. }) => {
            let saved = save_diverged(cfg, state);
            let err = anyhow!(e).context(format!("{tag} training diverged"));
            Err(match saved {
                Ok(p) => err.context(format!("last finite state saved to {}", p.display())),
                Err(s) => err.context(format!("saving the diverged state failed too: {s:#}")),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn save_diverged(cfg: &RunConfig, state: &TrainState) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out)?;
    let p = cfg.out.join(DIVERGED);
    if p.exists() {
        bail!("{} already exists", p.display());
    }
    write_checkpoint(state, &p)?;
    let snap = cfg.out.join(SNAPSHOT);
    if !snap.exists() {
        fs::write(snap, cfg.to_toml()?)?;
    }
    Ok(p)
}

/// The teacher from `teacher.checkpoint`, or one trained now and staged as
/// `teacher.ckpt` with `teacher_metrics.csv`.
fn obtain_teacher(cfg: &RunConfig, data: &mut Data, stage: &Staging) -> Result<ConvNet> {
    if let Some(p) = &cfg.teacher.checkpoint {
        let state = read_checkpoint(p).with_context(|| format!("reading teacher checkpoint {}", p.display()))?;
        if state.model.arch != cfg.arch {
            bail!(
                "invalid config field `arch`: does not match the teacher checkpoint {} ({:?})",
                p.display(),
                state.model.arch
            );
        }
        return Ok(state.model);
    }
    let (train, test) = data.get()?;
    let tcfg = cfg.teacher_train_config();
    let mut state = TrainState::new(build_teacher(cfg.arch.clone(), tcfg.seed)?, &tcfg);
    let log = fit_or_snapshot(cfg, "teacher", &mut state, train, test, None, &DistillConfig::cross_entropy(), &tcfg)?;
    write_checkpoint(&state, &stage.path("teacher.ckpt"))?;
    write_metrics_csv(&log, &stage.path("teacher_metrics.csv"))?;
    Ok(state.model)
}

fn teacher_logits(cfg: &RunConfig, teacher: &ConvNet, train: &LabeledDataset) -> Result<Option<DenseMatrix>> {
    if cfg.distill.beta > 0.0 {
        Ok(Some(teacher.predict(&train.images, cfg.optim.eval_chunk)?))
    } else {
        Ok(None)
    }
}

/// Validates `cfg`, runs its command and commits the artifacts.
pub fn run(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let stage = Staging::new(&cfg.out)?;
    stage.write(SNAPSHOT, cfg.to_toml()?)?;
    match cfg.command {
        Command::Train => train(cfg, &stage)?,
        Command::Init => init(cfg, &stage)?,
        Command::Explore => explore(cfg, &stage)?,
        Command::Cost => cost(cfg, &stage)?,
        Command::Analyze => analyze(cfg, &stage)?,
    }
    stage.commit()
}

fn train(cfg: &RunConfig, stage: &Staging) -> Result<()> {
    let mut data = Data::new(cfg);
    let tcfg = cfg.train_config();
    let (state, log, fits) = match cfg.target {
        Target::Teacher => {
            let (train, test) = data.get()?;
            let mut state = TrainState::new(build_teacher(cfg.arch.clone(), tcfg.seed)?, &tcfg);
            let log =
                fit_or_snapshot(cfg, "teacher", &mut state, train, test, None, &DistillConfig::cross_entropy(), &tcfg)?;
            (state, log, Vec::new())
        }
        Target::Student => {
            let teacher = obtain_teacher(cfg, &mut data, stage)?;
            let (train, test) = data.get()?;
            let logits = teacher_logits(cfg, &teacher, train)?;
            let (model, fits) = build_student(&teacher, &cfg.student_config(), tcfg.seed)?;
            let mut state = TrainState::new(model, &tcfg);
            let log = fit_or_snapshot(cfg, "student", &mut state, train, test, logits.as_ref(), &cfg.distill, &tcfg)?;
            (state, log, fits)
        }
    };
    write_checkpoint(&state, &stage.path("model.ckpt"))?;
    write_metrics_csv(&log, &stage.path("metrics.csv"))?;
    if !fits.is_empty() {
        let rows: Vec<_> = fits.iter().enumerate().map(|(l, f)| FitRow::new(l, f)).collect();
        stage.write_json("init.json", &rows)?;
    }
    if let Some(m) = log.last() {
        println!("final test accuracy {:.4} after {} epochs", m.test_acc, m.epoch);
    }
    Ok(())
}

#[derive(Serialize)]
struct FitRow {
    layer: usize,
    dims: KernelDims,
    bi: usize,
    bc: usize,
    residual: f64,
    relative_residual: f64,
    iterations: usize,
}

impl FitRow {
    fn new(layer: usize, f: &InitResult) -> Self {
        Self {
            layer,
            dims: f.params.dims,
            bi: f.params.card.bi,
            bc: f.params.card.bc,
            residual: f.residual,
            relative_residual: f.relative_residual,
            iterations: f.iterations,
        }
    }
}

#[derive(Serialize)]
struct InitRow {
    layer: usize,
    dims: KernelDims,
    bi: usize,
    bc: usize,
    l2_residual: f64,
    l2_relative: f64,
    l2_iterations: usize,
    svd_residual: f64,
    svd_relative: f64,
}

fn init(cfg: &RunConfig, stage: &Staging) -> Result<()> {
    let mut data = Data::new(cfg);
    let teacher = obtain_teacher(cfg, &mut data, stage)?;
    let scfg = StudentConfig {
        init: StudentInit::L2,
        ..cfg.student_config()
    };
    let (_, fits) = build_student(&teacher, &scfg, cfg.seed)?;
    let kernels = teacher.kernels()?;
    let mut rows = Vec::with_capacity(fits.len());
    for (l, (fit, g)) in fits.iter().zip(&kernels).enumerate() {
        let svd = svd_init(&g.kernel, fit.params.dims, cfg.student.bi, cfg.student.bc)?;
        let mut w = BufWriter::new(File::create(stage.path(&format!("conv{l}.isgw")))?);
        write_container(&mut w, &fit.params, &cfg.bits, cfg.student.quantize)?;
        w.flush()?;
        rows.push(InitRow {
            layer: l,
            dims: fit.params.dims,
            bi: fit.params.card.bi,
            bc: fit.params.card.bc,
            l2_residual: fit.residual,
            l2_relative: fit.relative_residual,
            l2_iterations: fit.iterations,
            svd_residual: svd.residual,
            svd_relative: svd.relative_residual,
        });
    }
    let mut table = format!(
        "{:<6} {:>14} {:>4} {:>4} {:>12} {:>12}\n",
        "layer", "C_o x C_i x k", "B_i", "B_c", "l2 rel", "svd rel"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "conv{:<2} {:>14} {:>4} {:>4} {:>12.4e} {:>12.4e}",
            r.layer,
            format!("{}x{}x{}", r.dims.c_out, r.dims.c_in, r.dims.k),
            r.bi,
            r.bc,
            r.l2_relative,
            r.svd_relative
        );
    }
    print!("{table}");
    stage.write_json("init.json", &rows)?;
    stage.write("init.txt", table)
}

fn explore(cfg: &RunConfig, stage: &Staging) -> Result<()> {
    let mut data = Data::new(cfg);
    let teacher = obtain_teacher(cfg, &mut data, stage)?;
    let (train, test) = data.get()?;
    let logits = teacher_logits(cfg, &teacher, train)?;
    let spec = cfg.grid_spec();
    let result = grid_search(
        &teacher,
        logits.as_ref(),
        train,
        test,
        &spec,
        &cfg.student_config(),
        &cfg.distill,
        &cfg.train_config(),
        |p| {
            eprintln!(
                "point B_i={} B_c={} bits=({},{},{}): r {:.4} r_m {:.4} acc {:.4} ({:.1} s){}",
                p.bi,
                p.bc,
                p.qb,
                p.qu,
                p.qv,
                p.r,
                p.r_m,
                p.accuracy,
                p.runtime,
                if p.heuristic { " [heuristic]" } else { "" }
            )
        },
    )?;
    for s in &result.skipped {
        eprintln!("skipped B_i={} B_c={} bits={:?}: {}", s.bi, s.bc, s.bits, s.reason);
    }
    stage.write("contour.csv", contour_csv(&result.points)?)?;
    stage.write_json("contour.json", &result)?;
    let front = pareto_front(&result.points);
    println!("{} points, {} on the Pareto front", result.points.len(), front.len());
    stage.write_json("pareto.json", &front)
}

fn cost(cfg: &RunConfig, stage: &Staging) -> Result<()> {
    let layers = match &cfg.cost.layers {
        Some(l) => l.clone(),
        None => cfg
            .arch
            .kernel_dims()
            .into_iter()
            .enumerate()
            .map(|(i, dims)| LayerSpec {
                name: format!("conv{i}"),
                dims,
            })
            .collect(),
    };
    let report = speedup_report(&layers, &cfg.bits, cfg.student.bi, cfg.student.bc, &cfg.device)?;
    let table = report.to_table();
    print!("{table}");
    stage.write("cost.json", report.to_json()? + "\n")?;
    stage.write("cost.txt", table)
}

#[derive(Serialize)]
struct CorrelationRow {
    layer: usize,
    dims: KernelDims,
    /// Absent for 1x1 kernels.
    intra: Option<Correlation>,
    cross: Correlation,
}

fn analyze(cfg: &RunConfig, stage: &Staging) -> Result<()> {
    let path = cfg.analyze.checkpoint.as_ref().expect("checked by validate");
    let state = read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut rows = Vec::new();
    for (l, (p, g)) in state.model.convs.iter().zip(state.model.kernels()?).enumerate() {
        let ctx = |mode: &str| format!("{mode} correlation of conv{l}");
        let intra = if p.dims.k > 1 {
            Some(kernel_correlation(&g.kernel, p.dims, CorrelationMode::Intra).with_context(|| ctx("intra"))?)
        } else {
            None
        };
        let cross = kernel_correlation(&g.kernel, p.dims, CorrelationMode::Cross).with_context(|| ctx("cross"))?;
        rows.push(CorrelationRow {
            layer: l,
            dims: p.dims,
            intra,
            cross,
        });
    }
    let mut table = format!(
        "{:<6} {:>14} {:>18} {:>18}\n",
        "layer", "C_o x C_i x k", "intra mean+-std", "cross mean+-std"
    );
    for r in &rows {
        let intra = r
            .intra
            .map_or_else(|| "-".to_string(), |c| format!("{:.4}+-{:.4}", c.mean, c.std));
        let _ = writeln!(
            table,
            "conv{:<2} {:>14} {:>18} {:>18}",
            r.layer,
            format!("{}x{}x{}", r.dims.c_out, r.dims.c_in, r.dims.k),
            intra,
            format!("{:.4}+-{:.4}", r.cross.mean, r.cross.std)
        );
    }
    print!("{table}");
    stage.write_json("correlation.json", &rows)?;
    stage.write("correlation.txt", table)
}
