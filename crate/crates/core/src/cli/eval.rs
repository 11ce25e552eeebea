use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use super::rollout::{rollout, CheckpointPolicy, EpisodeLog};
use crate::config::{Config, SuiteEntry};
use crate::error::{Error, Result};
use crate::trainer::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub instruction: u32,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentResult {
    pub embodiment: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalized_reward: Option<f64>,
    pub tasks: Vec<TaskResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub name: String,
    pub checkpoint: String,
    pub results: Vec<EmbodimentResult>,
    /// Mean success rate over the suite's embodiments.
    pub mean_success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed_base: u64,
    pub policies: Vec<PolicyReport>,
}

impl EvalReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text table, one row per (policy, embodiment).
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:<12} {:>7} {:>9} {:>8}\n",
            "policy", "embodiment", "trials", "success", "reward"
        );
        for p in &self.policies {
            for r in &p.results {
                let reward = r
                    .normalized_reward
                    .map(|v| format!("{v:.3}"))
                    .unwrap_or_else(|| "-".into());
                out += &format!(
                    "{:<14} {:<12} {:>7} {:>9.3} {:>8}\n",
                    p.name, r.embodiment, r.trials, r.success_rate, reward
                );
            }
        }
        out
    }
}

/// Summarizes episodes of one embodiment.
pub fn aggregate(embodiment: &str, episodes: &[EpisodeLog]) -> EmbodimentResult {
    let mut tasks: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for e in episodes {
        let t = tasks.entry(e.instruction).or_default();
        t.0 += 1;
        t.1 += usize::from(e.success);
    }
    let rate = |s: usize, n: usize| if n == 0 { 0.0 } else { s as f64 / n as f64 };
    let successes = episodes.iter().filter(|e| e.success).count();
    let rewards: Vec<f64> = episodes.iter().filter_map(|e| e.normalized_reward).collect();
    EmbodimentResult {
        embodiment: embodiment.to_owned(),
        trials: episodes.len(),
        successes,
        success_rate: rate(successes, episodes.len()),
        normalized_reward: (!rewards.is_empty())
            .then(|| rewards.iter().sum::<f64>() / rewards.len() as f64),
        tasks: tasks
            .into_iter()
            .map(|(instruction, (n, s))| TaskResult {
                instruction,
                trials: n,
                successes: s,
                success_rate: rate(s, n),
            })
            .collect(),
    }
}

/// Runs trial `i` with seed `seed_base + i` on `workers` threads. Results
/// come back in trial order.
pub fn run_trials<F>(
    embodiment: &str,
    trials: usize,
    seed_base: u64,
    workers: usize,
    make_policy: F,
) -> Result<Vec<EpisodeLog>>
where
    F: Fn() -> Result<CheckpointPolicy> + Sync,
{
    let workers = workers.clamp(1, trials.max(1));
    let mut slots: Vec<Option<Result<EpisodeLog>>> = (0..trials).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let make_policy = &make_policy;
                s.spawn(move || -> Vec<(usize, Result<EpisodeLog>)> {
                    let mut policy = match make_policy() {
                        Ok(p) => p,
                        Err(e) => return vec![(w, Err(e))],
                    };
                    (w..trials)
                        .step_by(workers)
                        .map(|i| (i, rollout(&mut policy, embodiment, seed_base + i as u64)))
                        .collect()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::Execution("trial did not run".into()))))
        .collect()
}

/// Evaluates one checkpoint on `suite`.
pub fn evaluate_checkpoint(
    name: &str,
    path: &Path,
    suite: &[SuiteEntry],
    seed_base: u64,
    workers: usize,
) -> Result<PolicyReport> {
    let ckpt = Checkpoint::load(path)?;
    let (model, store) = ckpt.policy()?;
    let mut results = Vec::new();
    for entry in suite {
        let episodes = run_trials(&entry.embodiment, entry.trials, seed_base, workers, || {
            Ok(CheckpointPolicy::new(model.clone(), store.clone()))
        })?;
        results.push(aggregate(&entry.embodiment, &episodes));
    }
    let mean_success_rate = if results.is_empty() {
        0.0
    } else {
        results.iter().map(|r| r.success_rate).sum::<f64>() / results.len() as f64
    };
    Ok(PolicyReport {
        name: name.to_owned(),
        checkpoint: path.display().to_string(),
        results,
        mean_success_rate,
    })
}

/// Evaluates every `(name, checkpoint)` on the config's suite. Every
/// checkpoint must be layout-compatible with `config`.
pub fn evaluate(
    config: &Config,
    checkpoints: &[(String, PathBuf)],
    seed_base: u64,
    workers: usize,
) -> Result<EvalReport> {
    let mut policies = Vec::new();
    for (name, path) in checkpoints {
        Checkpoint::load(path)?.check_compatible(config)?;
        policies.push(evaluate_checkpoint(name, path, &config.eval.suite, seed_base, workers)?);
    }
    Ok(EvalReport {
        config_hash: config.hash(),
        seed_base,
        policies,
    })
}

/// Number of worker threads to use by default.
pub fn default_workers() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
