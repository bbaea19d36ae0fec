//! Training stages, checkpoints, logs and evaluation.

mod checkpoint;
mod config;
mod eval;
mod log;
pub mod metrics;
mod stages;

pub use checkpoint::{checkpoint_id, param_hash, Checkpoint, Stage};
pub use config::{DataConfig, StageConfig, TrainConfig};
pub use eval::{evaluate, EvalOptions, EvalReport, ImageRecord, SubsetStats, Variant, IOU_THRESHOLD};
pub use log::TrainLog;
pub use stages::{
    alignment_train_set, clean_faces, encoder_probe, eval_set, fixed_set_rec, init_checkpoint, reset_alignment, train_stage_a1, train_stage_a2,
    train_stage_b, train_stages, StageSummary,
};
