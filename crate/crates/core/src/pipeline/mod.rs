//! Progressive training: initial encoders, image-text and attribute
//! pretraining, then triplet fine-tuning, with evaluation and the baseline
//! runs that feed pseudo labels.

pub mod config;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod train;

pub use config::{InitSource, RunConfig};
pub use gradcheck::{gradient_suite, GradientCheck, LossKind};
pub use model::{BoundModel, ModelDims, ParamGroup, StageRecord, TrainedModel};
pub use optim::{lr_decay, Adam};
pub use train::{
    evaluate, init_stage1, label_training_triplets, ranks, run_stage2, run_stage3, stage_rng,
    train_baselines, Baselines, Task, TrainLog,
};
