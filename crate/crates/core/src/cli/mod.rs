//! The operations behind the `crossbody` command: data generation,
//! receding-horizon rollouts, evaluation reports, verification suites and
//! layout inspection.

mod eval;
mod inspect;
mod parity;
mod rollout;
mod verify;

use std::path::{Path, PathBuf};
use std::thread;

pub use eval::{
    aggregate, default_workers, evaluate, evaluate_checkpoint, run_trials, EmbodimentResult,
    EvalReport, PolicyReport, TaskResult,
};
pub use inspect::{describe_checkpoint, inspect};
pub use parity::{
    parity_dir, parity_run, ParityOptions, ParityReport, ParityRow, ZeroShot, PARITY_GAP,
    QUAD_REWARD_FLOOR, ZERO_SHOT_RATIO,
};
pub use rollout::{
    rollout, CheckpointPolicy, EpisodeLog, ExpertPolicy, RandomPolicy, RolloutPolicy,
    QUAD_SUCCESS_REWARD,
};
pub use verify::{
    check_mask_case, grad_check, mixed_batch, mixture_audit, random_mask_case,
    relabel_chi_square, verify, verify_format, verify_grads, verify_masks, verify_mixture,
    verify_relabel, GradCheckOptions, MaskCase, VerifyKind, VerifyReport, MIXTURE_TOLERANCE,
};

use crate::datapipe::{read_shard, write_shard, DatasetShard};
use crate::envs::generate_dataset;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Trajectory counts of the desk datasets.
pub const DESK_DATASETS: [(&str, usize); 4] =
    [("arm1", 500), ("nav", 500), ("bimanual", 300), ("quad", 300)];

/// File name of a dataset shard.
pub fn shard_path(dir: &Path, dataset: &str) -> PathBuf {
    dir.join(format!("{dataset}.xeds"))
}

/// Generates each `(embodiment, count)` dataset in parallel and writes it
/// to `out`. Dataset `i` uses seed `derive_seed(seed, 0, i)`.
pub fn gen_data(out: &Path, datasets: &[(String, usize)], seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    thread::scope(|s| {
        let handles: Vec<_> = datasets
            .iter()
            .enumerate()
            .map(|(i, (name, n))| {
                s.spawn(move || -> Result<PathBuf> {
                    let shard = generate_dataset(name, *n, derive_seed(seed, 0, i as u64))?;
                    let path = shard_path(out, name);
                    write_shard(&path, &shard.header, &shard.trajectories)?;
                    Ok(path)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect()
    })
}

/// Reads every `*.xeds` file in `dir`, sorted by name.
pub fn load_shards(dir: &Path) -> Result<Vec<DatasetShard>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xeds"))
        .collect();
    paths.sort();
    paths.iter().map(read_shard).collect()
}
