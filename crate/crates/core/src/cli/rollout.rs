use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::assembler::ObservationFrame;
use crate::autodiff::ParamStore;
use crate::envs::Env;
use crate::error::Result;
use crate::heads::ActionChunk;
use crate::model::PolicyModel;
use crate::trainer::Checkpoint;

/// Quadruped episodes count as successful at this normalized reward.
pub const QUAD_SUCCESS_REWARD: f64 = 0.8;

/// Something that maps an observation history to an action chunk.
pub trait RolloutPolicy {
    /// Frames kept in the history buffer.
    fn history(&self) -> usize;

    /// Chunk for the embodiment's own head, given up to `history()` frames
    /// (oldest first).
    fn act(&mut self, env: &Env, frames: &[ObservationFrame]) -> Result<ActionChunk>;
}

/// A trained policy decoded at the newest step of its window.
pub struct CheckpointPolicy {
    model: PolicyModel,
    store: ParamStore<f32>,
}

impl CheckpointPolicy {
    pub fn new(model: PolicyModel, store: ParamStore<f32>) -> Self {
        Self { model, store }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, store) = ckpt.policy()?;
        Ok(Self::new(model, store))
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }
}

impl RolloutPolicy for CheckpointPolicy {
    fn history(&self) -> usize {
        self.model.layout.history()
    }

    fn act(&mut self, env: &Env, frames: &[ObservationFrame]) -> Result<ActionChunk> {
        self.model.predict(&self.store, frames, env.spec().head)
    }
}

/// The scripted expert, reading the simulator state. Only meaningful as an
/// oracle.
pub struct ExpertPolicy {
    pub chunk: usize,
}

impl RolloutPolicy for ExpertPolicy {
    fn history(&self) -> usize {
        1
    }

    fn act(&mut self, env: &Env, _frames: &[ObservationFrame]) -> Result<ActionChunk> {
        env.expert_chunk(self.chunk)
    }
}

/// Uniform random actions in `[-1, 1]`, for baselines.
pub struct RandomPolicy {
    pub chunk: usize,
    pub rng: crate::rng::StreamRng,
}

impl RolloutPolicy for RandomPolicy {
    fn history(&self) -> usize {
        1
    }

    fn act(&mut self, env: &Env, _frames: &[ObservationFrame]) -> Result<ActionChunk> {
        use rand::Rng;
        let dim = env.spec().head.action_dim();
        let rows: Vec<Vec<f32>> = (0..self.chunk)
            .map(|_| (0..dim).map(|_| self.rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        ActionChunk::from_rows(env.spec().head, &rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub embodiment: String,
    pub seed: u64,
    pub instruction: u32,
    pub steps: usize,
    pub forward_passes: usize,
    pub success: bool,
    /// Per-step reward (quadruped only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub rewards: Vec<f64>,
    /// Mean reward over the expert's mean reward on the same seed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalized_reward: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Receding-horizon episode: predict a chunk from the last `k` frames,
/// execute every row, replan.
pub fn rollout(policy: &mut dyn RolloutPolicy, embodiment: &str, seed: u64) -> Result<EpisodeLog> {
    let (mut env, frame, task) = Env::reset(embodiment, seed)?;
    let k = policy.history().max(1);
    let mut buffer = VecDeque::with_capacity(k);
    buffer.push_back(frame);
    let mut forward_passes = 0;
    let mut rewards = Vec::new();
    while !env.done() {
        let frames: Vec<ObservationFrame> = buffer.iter().cloned().collect();
        let chunk = policy.act(&env, &frames)?;
        forward_passes += 1;
        for f in env.step_chunk(&chunk)? {
            if let Some(r) = env.reward() {
                rewards.push(r);
            }
            if buffer.len() == k {
                buffer.pop_front();
            }
            buffer.push_back(f);
        }
    }
    let normalized_reward = if rewards.is_empty() {
        None
    } else {
        let expert = expert_rewards(embodiment, seed)?;
        Some(mean(&rewards) / mean(&expert))
    };
    let success = match normalized_reward {
        Some(r) => r >= QUAD_SUCCESS_REWARD,
        None => env.success(),
    };
    Ok(EpisodeLog {
        embodiment: embodiment.to_owned(),
        seed,
        instruction: task.instruction,
        steps: env.steps_taken(),
        forward_passes,
        success,
        rewards,
        normalized_reward,
    })
}

fn expert_rewards(embodiment: &str, seed: u64) -> Result<Vec<f64>> {
    let (mut env, _, _) = Env::reset(embodiment, seed)?;
    let mut out = Vec::new();
    while !env.done() {
        let a = env.expert_action();
        env.step(&a)?;
        out.extend(env.reward());
    }
    Ok(out)
}
