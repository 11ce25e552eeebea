//! AdamW training with warm-up and inverse square-root decay, gradient
//! clipping, validation and checkpoint selection.

mod checkpoint;
mod optimizer;
mod run;

pub use checkpoint::{Checkpoint, Metrics, CHECKPOINT_MAGIC};
pub use optimizer::{adamw_step, clip_global_norm, lr_schedule, AdamW, OptimizerState};
pub use run::{prepare_data, select, train, validate, LogRecord, TrainOptions, TrainOutcome, ValidationSet};

#[cfg(test)]
mod tests;
