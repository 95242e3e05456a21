//! Training engine: learning-rate schedule, parameter groups, the AdamW
//! optimizer, checkpointing, metrics, and the pretraining / proxy /
//! finetuning loops.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod groups;
pub mod metrics;
pub mod optim;
pub mod runs;
pub mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Result, TrainError};
pub use groups::{make_param_groups, LrTable, ParamGroup};
pub use optim::{AdamW, OptimHyper};
pub use runs::{
    build_pretrain_model, finetune_run, pretrain_run, unimodal_proxy_pretrain, FinetuneOutcome,
    InitMode, PretrainOutcome, ProxyOptions, RunOptions,
};
pub use schedule::{lr_at, schedule_factor, Schedule};
