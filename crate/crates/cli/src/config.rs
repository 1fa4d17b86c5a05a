//! Run configuration: one TOML document per run.
//!
//! Every section is optional and falls back to its defaults. Unknown keys
//! are rejected so a misspelled field never goes unnoticed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use insitu_core::cost::{DeviceParams, LayerSpec};
use insitu_core::explore::GridSpec;
use insitu_core::generator::QuantConfig;
use insitu_core::train::{ArchSpec, DistillConfig, L2InitConfig, StudentConfig, StudentInit, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Init,
    Explore,
    Cost,
    Analyze,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Init => "init",
            Command::Explore => "explore",
            Command::Cost => "cost",
            Command::Analyze => "analyze",
        }
    }
}

/// Which network `train` produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Dense network trained with cross-entropy.
    Teacher,
    /// Generated network distilled from a teacher.
    #[default]
    Student,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory with the IDX files; `INSITU_DATA_DIR` or `data/fashion-mnist` when unset.
    pub dir: Option<PathBuf>,
    /// Keep only the first `n` samples of every class.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub bi: usize,
    pub bc: usize,
    pub init: StudentInit,
    /// Fake-quantize activations to this many bits.
    pub act_bits: Option<u32>,
    /// Train with fake-quantized factors at `[bits]`.
    pub quantize: bool,
    pub l2: L2InitConfig,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            bi: 2,
            bc: 12,
            init: StudentInit::L2,
            act_bits: None,
            quantize: false,
            l2: L2InitConfig::default(),
        }
    }
}

/// Optimizer settings; the seed lives at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub eval_chunk: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            lr_decay: t.lr_decay,
            eval_chunk: t.eval_chunk,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    /// Pretrained teacher; trained from scratch when unset.
    pub checkpoint: Option<PathBuf>,
    /// Epochs of a teacher trained from scratch (defaults to `optim.epochs`).
    pub epochs: Option<usize>,
}

/// Sweep axes; `q_w` comes from `[bits]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreSection {
    pub bi: Vec<usize>,
    pub bc: Vec<usize>,
    /// `[q_b, q_u, q_v]` triples.
    pub bits: Vec<[u32; 3]>,
    pub fake_quant: bool,
}

impl Default for ExploreSection {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            bi: g.bi,
            bc: g.bc,
            bits: g.bits,
            fake_quant: g.fake_quant,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    /// Layers to cost; the convolutions of `[arch]` when unset.
    pub layers: Option<Vec<LayerSpec>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub target: Target,
    #[serde(default)]
    pub arch: ArchSpec,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub bits: QuantConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub device: DeviceParams,
    #[serde(default)]
    pub explore: ExploreSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            seed: 0,
            out: default_out(),
            target: Target::default(),
            arch: ArchSpec::default(),
            data: DataSection::default(),
            student: StudentSection::default(),
            bits: QuantConfig::default(),
            distill: DistillConfig::default(),
            optim: OptimSection::default(),
            teacher: TeacherSection::default(),
            device: DeviceParams::default(),
            explore: ExploreSection::default(),
            cost: CostSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optim;
        TrainConfig {
            epochs: o.epochs,
            batch_size: o.batch_size,
            lr: o.lr,
            weight_decay: o.weight_decay,
            lr_decay: o.lr_decay,
            seed: self.seed,
            eval_chunk: o.eval_chunk,
        }
    }

    pub fn teacher_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher.epochs.unwrap_or(self.optim.epochs),
            ..self.train_config()
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        let s = &self.student;
        StudentConfig {
            bi: s.bi,
            bc: s.bc,
            quant: s.quantize.then_some(self.bits),
            act_bits: s.act_bits,
            init: s.init,
            l2: s.l2,
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            bi: self.explore.bi.clone(),
            bc: self.explore.bc.clone(),
            bits: self.explore.bits.clone(),
            qw: self.bits.qw,
            fake_quant: self.explore.fake_quant,
        }
    }

    /// Checks every section; errors name the offending field as `section.key`.
    pub fn validate(&self) -> Result<()> {
        field("seed", || {
            if self.seed > i64::MAX as u64 {
                bail!("must be at most {} to survive the TOML snapshot", i64::MAX);
            }
            Ok(())
        })?;
        field("out", || {
            if self.out.as_os_str().is_empty() {
                bail!("must not be empty");
            }
            Ok(())
        })?;
        field("arch", || Ok(self.arch.validate()?))?;
        field("optim", || Ok(self.train_config().validate()?))?;
        field("teacher", || Ok(self.teacher_train_config().validate()?))?;
        field("distill", || Ok(self.distill.validate()?))?;
        field("bits", || Ok(self.bits.validate()?))?;
        field("device", || Ok(self.device.validate()?))?;
        field("student.bi", || nonzero(self.student.bi))?;
        field("student.bc", || nonzero(self.student.bc))?;
        if self.student.quantize {
            field("bits", || Ok(self.bits.check_quantizable()?))?;
        }
        if let Some(b) = self.student.act_bits {
            field("student.act_bits", || Ok(insitu_core::quant::check_bits(b)?))?;
        }
        for (name, n) in [
            ("data.train_per_class", self.data.train_per_class),
            ("data.test_per_class", self.data.test_per_class),
        ] {
            if let Some(n) = n {
                field(name, || nonzero(n))?;
            }
        }
        match self.command {
            Command::Explore => {
                let e = &self.explore;
                field("explore.bi", || nonempty(&e.bi))?;
                field("explore.bc", || nonempty(&e.bc))?;
                field("explore.bits", || nonempty(&e.bits))?;
            }
            Command::Analyze if self.analyze.checkpoint.is_none() => {
                bail!("invalid config field `analyze.checkpoint`: required by the analyze command");
            }
            Command::Cost => {
                if let Some(layers) = &self.cost.layers {
                    field("cost.layers", || nonempty(layers))?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn field(name: &str, check: impl FnOnce() -> Result<()>) -> Result<()> {
    check().map_err(|e| match e.downcast_ref::<insitu_core::Error>() {
        Some(insitu_core::Error::Config { field, reason }) => {
            anyhow::anyhow!("invalid config field `{name}.{field}`: {reason}")
        }
        _ => anyhow::anyhow!("invalid config field `{name}`: {e:#}"),
    })
}

fn nonzero(n: usize) -> Result<()> {
    if n == 0 {
        bail!("must be >= 1");
    }
    Ok(())
}

fn nonempty<T>(v: &[T]) -> Result<()> {
    if v.is_empty() {
        bail!("must not be empty");
    }
    Ok(())
}
