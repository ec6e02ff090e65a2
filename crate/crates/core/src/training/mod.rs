//! Optimizers, learning-rate schedules, early stopping, the staged
//! transfer-learning protocol and checkpoint persistence.

mod checkpoint;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{clip_global_norm, AdamConfig, Optimizer, OptimizerKind};
pub use schedule::{EarlyStopping, EarlyStoppingConfig, LrSchedule, StopDecision};
pub use trainer::{
    evaluate_mse, load_pretrained, predict_scaled, run_protocol, train_stage, write_epoch_log, EpochRecord,
    Pretrained, ProtocolConfig, Stage, StageReport, TrainOutcome, TrainPlan, TrainReport,
};
