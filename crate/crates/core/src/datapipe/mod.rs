//! Trajectory storage, windowing, relabeling, augmentation and weighted
//! batch sampling.

mod augment;
mod pipeline;
mod sampling;
mod shard;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use pipeline::{
    build_example, chunk_target, frame_at, split_holdout, validation_examples, BatchSource,
    Prefetcher, TrainingExample,
};
pub use sampling::{
    mask_modality, relabel_goal, sample_mixture, window_trajectory, Conditioning, MixtureEntry,
    MixtureSampler, MixtureSpec, WindowSpan,
};
pub use shard::{
    decode_shard, encode_shard, read_shard, write_shard, DatasetShard, ShardHeader, StreamSpec,
    TrajectoryRecord, ACTIONS, SHARD_MAGIC,
};

#[cfg(test)]
mod tests;
