//! Training with in situ generated kernels.

mod checkpoint;
mod init;
mod layers;
mod loss;
mod model;
mod ortho;
mod radam;
mod trainer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use init::{l2_project_init, l2_refine, svd_init, InitResult, L2InitConfig};
pub use layers::*;
pub use loss::{accuracy, kd_loss, softmax, DistillConfig, LossOutput};
pub use model::{ArchSpec, ConvNet, ConvSpec, ForwardCache, ModelGrads, StudentInit};
pub use ortho::{ortho_reg, OrthoOutput};
pub use radam::RAdam;
pub use trainer::{
    build_student, build_teacher, evaluate, fit, metrics_csv, train_student, train_teacher, write_metrics_csv, EpochMetrics,
    StudentConfig, StudentRun, TrainConfig, TrainState,
};
