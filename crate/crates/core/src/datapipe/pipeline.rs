use std::collections::BTreeMap;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    mask_modality, relabel_goal, AugmentConfig, AugmentParams, Conditioning, DatasetShard,
    MixtureSampler, MixtureSpec, TrajectoryRecord, WindowSpan, ACTIONS,
};
use crate::assembler::{GroupKind, Observation, ObservationFrame, SlotLayout};
use crate::encoders::{ImageObservation, ProprioObservation, ViewKind};
use crate::error::{Error, Result};
use crate::heads::{ActionHeadSpec, ElementTarget, HeadKind, StepTarget};
use crate::rng::{stream, stream_rng};

/// Raw ingredients of one window plus its action targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub dataset: String,
    pub frames: Vec<ObservationFrame>,
    pub target: ElementTarget,
}

impl TrainingExample {
    pub fn head(&self) -> Option<HeadKind> {
        self.target.head
    }
}

fn image_at(
    traj: &TrajectoryRecord,
    shard: &DatasetShard,
    name: &str,
    view: ViewKind,
    t: usize,
) -> Result<ImageObservation> {
    let spec = shard.header.stream(name).ok_or_else(|| Error::Lookup {
        kind: "stream",
        name: name.to_owned(),
    })?;
    let size = spec.shape.last().copied().unwrap_or(0);
    ImageObservation::new(view, size, traj.step_of(name, spec.step_len(), t)?.to_vec())
}

/// Observation frame of step `t` with the given conditioning.
pub fn frame_at(
    shard: &DatasetShard,
    traj: &TrajectoryRecord,
    layout: &SlotLayout,
    t: usize,
    cond: &Conditioning<ImageObservation>,
) -> Result<ObservationFrame> {
    let mut observations = BTreeMap::new();
    for s in &shard.header.streams {
        if s.name == ACTIONS {
            continue;
        }
        let gi = layout.group_index(&s.name)?;
        let obs = match layout.groups()[gi].kind {
            GroupKind::Image(view) => Observation::Image(image_at(traj, shard, &s.name, view, t)?),
            GroupKind::Proprio(kind) => Observation::Proprio(ProprioObservation {
                kind,
                values: traj.step_of(&s.name, s.step_len(), t)?.to_vec(),
            }),
            GroupKind::Readout(_) => {
                return Err(Error::Format(format!(
                    "stream `{}` names a readout group",
                    s.name
                )))
            }
        };
        observations.insert(s.name.clone(), obs);
    }
    Ok(ObservationFrame {
        embodiment: traj.embodiment.clone(),
        observations,
        instruction: cond.instruction,
        goal: cond.goal.clone(),
    })
}

/// Chunk targets `a_t .. a_{t+C-1}`, zero-filled and unflagged past the end.
pub fn chunk_target(traj: &TrajectoryRecord, action_dim: usize, chunk: usize, t: usize) -> Result<(Vec<f32>, Vec<bool>)> {
    let actions = traj.actions()?;
    let mut values = vec![0.0; chunk * action_dim];
    let mut mask = vec![false; chunk * action_dim];
    for i in 0..chunk.min(traj.steps.saturating_sub(t)) {
        let src = &actions[(t + i) * action_dim..(t + i + 1) * action_dim];
        values[i * action_dim..(i + 1) * action_dim].copy_from_slice(src);
        mask[i * action_dim..(i + 1) * action_dim].fill(true);
    }
    Ok((values, mask))
}

/// Builds the example for the window ending at step `t` of `traj`:
/// hindsight goal, modality masking, augmentation, chunk targets.
pub fn build_example(
    shard: &DatasetShard,
    traj: &TrajectoryRecord,
    layout: &SlotLayout,
    spec: &ActionHeadSpec,
    t: usize,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let header = &shard.header;
    if spec.name != header.head {
        return Err(Error::Contract(format!(
            "dataset `{}` is supervised by {}, not {}",
            header.dataset, header.head, spec.name
        )));
    }
    let span = WindowSpan::ending_at(t, layout.history());
    let goal = match &header.goal_stream {
        Some(name) => {
            let g = relabel_goal(t, traj.steps, rng)?;
            let view = match layout.groups()[layout.group_index(name)?].kind {
                GroupKind::Image(v) => v,
                _ => {
                    return Err(Error::Format(format!(
                        "goal stream `{name}` is not an image group"
                    )))
                }
            };
            Some(image_at(traj, shard, name, view, g)?)
        }
        None => None,
    };
    let mut cond = mask_modality(
        Conditioning {
            instruction: traj.instruction,
            goal,
        },
        rng,
    );
    // one draw per image stream for the whole window, another for the goal
    let mut draws = BTreeMap::new();
    for s in &header.streams {
        if s.name != ACTIONS && s.shape.len() == 3 {
            draws.insert(s.name.clone(), AugmentParams::draw(augment, rng));
        }
    }
    if let Some(g) = &cond.goal {
        cond.goal = Some(AugmentParams::draw(augment, rng).apply(g));
    }
    let mut frames = Vec::with_capacity(span.len());
    let mut steps = Vec::with_capacity(span.len());
    for tau in span.start..=span.end {
        let mut frame = frame_at(shard, traj, layout, tau, &cond)?;
        for (name, p) in &draws {
            if let Some(Observation::Image(img)) = frame.observations.get_mut(name) {
                *img = p.apply(img);
            }
        }
        frames.push(frame);
        let (values, mask) = chunk_target(traj, spec.action_dim, spec.chunk_size, tau)?;
        steps.push(StepTarget {
            step: span.lead_pad + tau - span.start,
            values,
            mask,
        });
    }
    Ok(TrainingExample {
        dataset: header.dataset.clone(),
        frames,
        target: ElementTarget {
            head: Some(spec.name),
            steps,
        },
    })
}

/// Deterministically splits off `fraction` of the trajectories (at least
/// one when `fraction > 0` and there are two or more).
pub fn split_holdout(shard: DatasetShard, fraction: f64, seed: u64) -> (DatasetShard, DatasetShard) {
    let n = shard.trajectories.len();
    let mut held = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        held = held.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, stream::SPLIT, 0));
    let held_set: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &order[..held] {
            v[i] = true;
        }
        v
    };
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, t) in shard.trajectories.into_iter().enumerate() {
        if held_set[i] {
            val.push(t);
        } else {
            train.push(t);
        }
    }
    (
        DatasetShard {
            header: shard.header.clone(),
            trajectories: train,
        },
        DatasetShard {
            header: shard.header,
            trajectories: val,
        },
    )
}

/// Seeded batch construction over a weighted mixture of datasets.
///
/// Batch `i` depends only on `(seed, i)`: draw a dataset by weight, then a
/// uniform trajectory, then a uniform window end.
#[derive(Debug)]
pub struct BatchSource {
    layout: SlotLayout,
    heads: BTreeMap<HeadKind, ActionHeadSpec>,
    datasets: Vec<DatasetShard>,
    sampler: MixtureSampler,
    augment: AugmentConfig,
    batch_size: usize,
    seed: u64,
}

impl BatchSource {
    pub fn new(
        layout: SlotLayout,
        heads: &[ActionHeadSpec],
        shards: Vec<DatasetShard>,
        mixture: &MixtureSpec,
        augment: AugmentConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let sampler = MixtureSampler::new(mixture)?;
        let mut by_name: BTreeMap<String, DatasetShard> = shards
            .into_iter()
            .map(|s| (s.header.dataset.clone(), s))
            .collect();
        let heads: BTreeMap<_, _> = heads.iter().map(|h| (h.name, h.clone())).collect();
        let mut datasets = Vec::new();
        for e in &mixture.entries {
            let shard = by_name.remove(&e.dataset).ok_or_else(|| Error::Lookup {
                kind: "dataset",
                name: e.dataset.clone(),
            })?;
            if e.weight > 0.0 && shard.trajectories.is_empty() {
                return Err(Error::Config(format!(
                    "dataset `{}` has positive weight but no trajectories",
                    e.dataset
                )));
            }
            if !heads.contains_key(&shard.header.head) {
                return Err(Error::Config(format!(
                    "dataset `{}` needs head {} which is not configured",
                    e.dataset, shard.header.head
                )));
            }
            datasets.push(shard);
        }
        Ok(Self {
            layout,
            heads,
            datasets,
            sampler,
            augment,
            batch_size,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn datasets(&self) -> &[DatasetShard] {
        &self.datasets
    }

    pub fn example(&self, rng: &mut impl Rng) -> Result<TrainingExample> {
        let shard = &self.datasets[self.sampler.sample_index(rng)];
        let traj = &shard.trajectories[rng.gen_range(0..shard.trajectories.len())];
        let t = rng.gen_range(0..traj.steps);
        build_example(
            shard,
            traj,
            &self.layout,
            &self.heads[&shard.header.head],
            t,
            &self.augment,
            rng,
        )
    }

    pub fn batch(&self, index: u64) -> Result<Vec<TrainingExample>> {
        let mut rng = stream_rng(self.seed, stream::BATCH, index);
        (0..self.batch_size).map(|_| self.example(&mut rng)).collect()
    }
}

/// Fixed, unaugmented validation windows drawn from held-out trajectories.
pub fn validation_examples(
    shard: &DatasetShard,
    layout: &SlotLayout,
    spec: &ActionHeadSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    if shard.trajectories.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = stream_rng(seed, stream::VALIDATION, 0);
    let off = AugmentConfig {
        enabled: false,
        ..AugmentConfig::default()
    };
    (0..count)
        .map(|_| {
            let traj = &shard.trajectories[rng.gen_range(0..shard.trajectories.len())];
            let t = rng.gen_range(0..traj.steps);
            build_example(shard, traj, layout, spec, t, &off, &mut rng)
        })
        .collect()
}

/// Background batch construction with at most [`Prefetcher::DEPTH`]
/// batches in flight, delivered in request order.
pub struct Prefetcher {
    rx: Option<Receiver<Result<Vec<TrainingExample>>>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub const DEPTH: usize = 4;

    /// Produces batches `start, start + 1, ..` up to `end` (exclusive).
    pub fn spawn(source: Arc<BatchSource>, start: u64, end: u64) -> Self {
        // one batch may be held by the worker while the queue is full
        let (tx, rx) = sync_channel(Self::DEPTH - 1);
        let handle = std::thread::spawn(move || {
            for i in start..end {
                if tx.send(source.batch(i)).is_err() {
                    break;
                }
            }
        });
        Self {
            rx: Some(rx),
            handle: Some(handle),
        }
    }

    pub fn next_batch(&mut self) -> Option<Result<Vec<TrainingExample>>> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
