use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{adamw_step, clip_global_norm, lr_schedule, AdamW, Checkpoint, Metrics, OptimizerState};
use crate::autodiff::ParamStore;
use crate::config::Config;
use crate::datapipe::{split_holdout, validation_examples, BatchSource, DatasetShard, Prefetcher, TrainingExample};
use crate::error::{Error, Result};
use crate::heads::LossKind;
use crate::model::PolicyModel;

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub train_l1: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub val_mse: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Echo progress records to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// `(path, step, metrics)` of every saved checkpoint.
    pub checkpoints: Vec<(PathBuf, u64, Metrics)>,
    /// Index into `checkpoints` chosen by [`select`].
    pub best: usize,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    pub fn best_path(&self) -> &Path {
        &self.checkpoints[self.best].0
    }
}

/// Held-out windows per dataset.
pub type ValidationSet = Vec<(String, Vec<TrainingExample>)>;

/// Validation MSE per dataset.
pub fn validate(
    model: &PolicyModel,
    store: &ParamStore<f32>,
    sets: &ValidationSet,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (name, examples) in sets {
        if !examples.is_empty() {
            out.insert(name.clone(), model.batch_loss(store, examples, LossKind::Mse)?);
        }
    }
    Ok(out)
}

/// Index of the checkpoint with the lowest mean validation MSE; the last
/// checkpoint when none was validated. Ties go to the earlier step.
pub fn select(metrics: &[Metrics]) -> Option<usize> {
    let scored = metrics
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.mean_val_mse.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.map(|(i, _)| i).or(metrics.len().checked_sub(1))
}

/// Splits every shard into training and held-out parts.
pub fn prepare_data(config: &Config, shards: Vec<DatasetShard>) -> Result<(Vec<DatasetShard>, ValidationSet)> {
    let (model, _) = PolicyModel::init::<f32>(config, config.train.seed)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for shard in shards {
        let (tr, va) = split_holdout(shard, config.train.holdout_fraction, config.train.seed);
        let spec = model.heads.spec(va.header.head)?;
        let examples =
            validation_examples(&va, &model.layout, spec, config.train.val_windows, config.train.seed)?;
        val.push((va.header.dataset.clone(), examples));
        train.push(tr);
    }
    Ok((train, val))
}

/// Runs the configured number of AdamW steps over the config's mixture,
/// validating and checkpointing every `val_every` steps and at the end.
///
/// Writes `ckpt-<step>.xckpt`, `progress.jsonl` and a copy of the selected
/// checkpoint as `best.xckpt` into `out`.
pub fn train(
    config: &Config,
    shards: Vec<DatasetShard>,
    out: &Path,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let tc = &config.train;
    tc.validate()?;
    config.mixture.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let wanted: Vec<&str> = config.mixture.entries.iter().map(|e| e.dataset.as_str()).collect();
    let shards: Vec<DatasetShard> = shards
        .into_iter()
        .filter(|s| wanted.contains(&s.header.dataset.as_str()))
        .collect();
    let (train_shards, val_sets) = prepare_data(config, shards)?;
    let (model, mut store) = PolicyModel::init::<f32>(config, tc.seed)?;
    let source = Arc::new(BatchSource::new(
        model.layout.clone(),
        &config.heads,
        train_shards,
        &config.mixture,
        tc.augment.clone(),
        tc.batch_size,
        tc.seed,
    )?);
    let mut prefetch = Prefetcher::spawn(source, 0, tc.total_steps);
    let mut opt_state = OptimizerState::new(&store);
    let adamw = AdamW::new(tc.weight_decay);
    let log_path = out.join("progress.jsonl");
    let mut log_file =
        BufWriter::new(File::create(&log_path).map_err(|e| Error::file(&log_path, e))?);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let (mut window_sum, mut window_n) = (0.0, 0u64);
    let (mut val_sum, mut val_n) = (0.0, 0u64);

    for step in 1..=tc.total_steps {
        let batch = prefetch
            .next_batch()
            .ok_or_else(|| Error::Contract("batch producer stopped early".into()))??;
        let (loss, mut grads) = model.loss_and_grads(&store, &batch, LossKind::L1)?;
        if !loss.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("non-finite training loss {loss}"),
            });
        }
        let norm = clip_global_norm(&mut grads, tc.clip_norm).map_err(|e| {
            Error::TrainingAborted {
                step,
                reason: e.to_string(),
            }
        })?;
        let lr = lr_schedule(step, tc)?;
        adamw_step(&mut store, &grads, &mut opt_state, lr, &adamw)?;
        window_sum += loss;
        window_n += 1;
        val_sum += loss;
        val_n += 1;

        let validate_now = step % tc.val_every == 0 || step == tc.total_steps;
        if step % tc.log_every == 0 || validate_now {
            let mut rec = LogRecord {
                step,
                lr,
                train_l1: window_sum / window_n as f64,
                grad_norm: norm,
                val_mse: BTreeMap::new(),
            };
            window_sum = 0.0;
            window_n = 0;
            if validate_now {
                let val_mse = validate(&model, &store, &val_sets)?;
                let mean = (!val_mse.is_empty())
                    .then(|| val_mse.values().sum::<f64>() / val_mse.len() as f64);
                let metrics = Metrics {
                    train_l1: Some(val_sum / val_n as f64),
                    val_mse: val_mse.clone(),
                    mean_val_mse: mean,
                };
                val_sum = 0.0;
                val_n = 0;
                let ckpt = Checkpoint {
                    config: config.clone(),
                    layout: model.layout.canonical(),
                    step,
                    metrics: metrics.clone(),
                    params: store.clone(),
                    optimizer: Some(opt_state.clone()),
                };
                let path = out.join(format!("ckpt-{step:06}.xckpt"));
                ckpt.save(&path)?;
                checkpoints.push((path, step, metrics));
                rec.val_mse = val_mse;
            }
            let line = serde_json::to_string(&rec)?;
            writeln!(log_file, "{line}")?;
            log_file.flush()?;
            if options.verbose {
                eprintln!("{line}");
            }
            log.push(rec);
        }
    }
    let metrics: Vec<Metrics> = checkpoints.iter().map(|c| c.2.clone()).collect();
    let best = select(&metrics).expect("the final step always checkpoints");
    let best_copy = out.join("best.xckpt");
    std::fs::copy(&checkpoints[best].0, &best_copy).map_err(|e| Error::file(&best_copy, e))?;
    Ok(TrainOutcome {
        checkpoints,
        best,
        log,
    })
}
