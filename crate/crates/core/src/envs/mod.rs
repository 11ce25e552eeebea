//! Toy embodiments with scripted experts.
//!
//! | name        | observation groups                               | head       | horizon |
//! |-------------|--------------------------------------------------|------------|---------|
//! | arm1        | workspace, wrist-left                            | single-arm | 60      |
//! | nav         | navigation                                       | navigation | 40      |
//! | nav-shifted | navigation                                       | navigation | 40      |
//! | bimanual    | wrist-left, wrist-right, proprio-bimanual        | bimanual   | 60      |
//! | quad        | proprio-quadruped                                | quadruped  | 200     |
//!
//! Group names refer to layout groups of the same name. arm1 and nav are
//! goal-image conditioned (instruction 0); bimanual tasks are selected by
//! instructions 1-4; the quadruped always receives instruction 20 and no
//! goal.

pub mod arm;
pub mod bimanual;
pub mod nav;
pub mod quad;
pub mod render;

use std::collections::BTreeMap;

use rand::Rng;

use crate::assembler::{Observation, ObservationFrame};
use crate::datapipe::{DatasetShard, ShardHeader, StreamSpec, TrajectoryRecord, ACTIONS};
use crate::encoders::{GoalImage, ProprioKind, ProprioObservation, ViewKind};
use crate::error::{Error, Result};
use crate::heads::{ActionChunk, HeadKind};
use crate::rng::{derive_seed, stream, stream_rng};

pub use arm::ArmState;
pub use bimanual::BimanualState;
pub use nav::{NavDynamics, NavState};
pub use quad::QuadState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupSource {
    Image(ViewKind),
    Proprio(ProprioKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbodimentSpec {
    pub name: &'static str,
    pub groups: &'static [(&'static str, GroupSource)],
    pub head: HeadKind,
    pub horizon: usize,
    /// Image group used for goal conditioning.
    pub goal_group: Option<&'static str>,
    /// Instruction ids an episode may draw.
    pub instructions: &'static [u32],
    /// Episodes end as soon as the task succeeds.
    pub stop_on_success: bool,
}

pub const LANGUAGE_VOCAB: u32 = 32;
pub const QUAD_INSTRUCTION: u32 = 20;

pub const EMBODIMENTS: [EmbodimentSpec; 5] = [
    EmbodimentSpec {
        name: "arm1",
        groups: &[
            ("workspace", GroupSource::Image(ViewKind::Workspace)),
            ("wrist-left", GroupSource::Image(ViewKind::WristLeft)),
        ],
        head: HeadKind::SingleArm,
        horizon: 60,
        goal_group: Some("workspace"),
        instructions: &[0],
        stop_on_success: true,
    },
    EmbodimentSpec {
        name: "nav",
        groups: &[("navigation", GroupSource::Image(ViewKind::Navigation))],
        head: HeadKind::Navigation,
        horizon: 40,
        goal_group: Some("navigation"),
        instructions: &[0],
        stop_on_success: true,
    },
    EmbodimentSpec {
        name: "nav-shifted",
        groups: &[("navigation", GroupSource::Image(ViewKind::Navigation))],
        head: HeadKind::Navigation,
        horizon: 40,
        goal_group: Some("navigation"),
        instructions: &[0],
        stop_on_success: true,
    },
    EmbodimentSpec {
        name: "bimanual",
        groups: &[
            ("wrist-left", GroupSource::Image(ViewKind::WristLeft)),
            ("wrist-right", GroupSource::Image(ViewKind::WristRight)),
            ("proprio-bimanual", GroupSource::Proprio(ProprioKind::Bimanual)),
        ],
        head: HeadKind::Bimanual,
        horizon: bimanual::HORIZON,
        goal_group: Some("wrist-left"),
        instructions: &[1, 2, 3, 4],
        stop_on_success: false,
    },
    EmbodimentSpec {
        name: "quad",
        groups: &[("proprio-quadruped", GroupSource::Proprio(ProprioKind::Quadruped))],
        head: HeadKind::Quadruped,
        horizon: 200,
        goal_group: None,
        instructions: &[QUAD_INSTRUCTION],
        stop_on_success: false,
    },
];

pub fn embodiment(name: &str) -> Result<&'static EmbodimentSpec> {
    EMBODIMENTS
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Lookup {
            kind: "embodiment",
            name: name.to_owned(),
        })
}

/// How an episode is specified to the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub instruction: u32,
    pub goal: Option<GoalImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvState {
    Arm(ArmState),
    Nav(NavState),
    Bimanual(BimanualState),
    Quad(QuadState),
}

impl EnvState {
    fn step(&mut self, a: &[f64]) {
        match self {
            EnvState::Arm(s) => s.step(a),
            EnvState::Nav(s) => s.step(a),
            EnvState::Bimanual(s) => s.step(a),
            EnvState::Quad(s) => s.step(a),
        }
    }

    fn expert(&self) -> Vec<f64> {
        match self {
            EnvState::Arm(s) => s.expert(),
            EnvState::Nav(s) => s.expert(),
            EnvState::Bimanual(s) => s.expert(),
            EnvState::Quad(s) => s.expert(),
        }
    }

    fn success(&self) -> bool {
        match self {
            EnvState::Arm(s) => s.success(),
            EnvState::Nav(s) => s.success(),
            EnvState::Bimanual(s) => s.success(),
            EnvState::Quad(_) => false,
        }
    }

    fn observe(&self, group: &str, source: GroupSource) -> Observation {
        match (self, source) {
            (EnvState::Arm(s), GroupSource::Image(ViewKind::Workspace)) => {
                Observation::Image(s.render_workspace())
            }
            (EnvState::Arm(s), GroupSource::Image(_)) => Observation::Image(s.render_wrist()),
            (EnvState::Nav(s), _) => Observation::Image(s.render()),
            (EnvState::Bimanual(s), GroupSource::Image(v)) => Observation::Image(s.render(v)),
            (EnvState::Bimanual(s), GroupSource::Proprio(kind)) => {
                Observation::Proprio(ProprioObservation {
                    kind,
                    values: s.proprio(),
                })
            }
            (EnvState::Quad(s), GroupSource::Proprio(kind)) => {
                Observation::Proprio(ProprioObservation {
                    kind,
                    values: s.proprio(),
                })
            }
            _ => unreachable!("group `{group}` is not registered for this state"),
        }
    }

    /// Rendering of the state the task asks for, if the task has a goal
    /// image.
    fn goal_state(&self) -> Option<EnvState> {
        match self {
            EnvState::Arm(s) => Some(EnvState::Arm(s.goal_state())),
            EnvState::Nav(s) => Some(EnvState::Nav(s.goal_state())),
            _ => None,
        }
    }
}

/// One running episode.
#[derive(Clone, Debug)]
pub struct Env {
    spec: &'static EmbodimentSpec,
    state: EnvState,
    t: usize,
    task: TaskSpec,
}

impl Env {
    /// Seeded initial state, first frame and task.
    pub fn reset(name: &str, seed: u64) -> Result<(Env, ObservationFrame, TaskSpec)> {
        let spec = embodiment(name)?;
        let mut rng = stream_rng(seed, stream::EVAL, 0);
        let instruction = spec.instructions[rng.gen_range(0..spec.instructions.len())];
        let state = match spec.name {
            "arm1" => EnvState::Arm(ArmState::reset(&mut rng)),
            "nav" => EnvState::Nav(NavState::reset(NavDynamics::NAV, &mut rng)),
            "nav-shifted" => EnvState::Nav(NavState::reset(NavDynamics::SHIFTED, &mut rng)),
            "bimanual" => EnvState::Bimanual(BimanualState::reset(instruction, &mut rng)),
            _ => EnvState::Quad(QuadState::reset(&mut rng)),
        };
        let goal = match (spec.goal_group, state.goal_state(), instruction) {
            (Some(g), Some(gs), 0) => {
                let source = spec.groups.iter().find(|(n, _)| *n == g).expect("goal group").1;
                match gs.observe(g, source) {
                    Observation::Image(img) => Some(img),
                    Observation::Proprio(_) => None,
                }
            }
            _ => None,
        };
        let task = TaskSpec { instruction, goal };
        let env = Env {
            spec,
            state,
            t: 0,
            task: task.clone(),
        };
        let frame = env.observe();
        Ok((env, frame, task))
    }

    pub fn spec(&self) -> &'static EmbodimentSpec {
        self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Current frame with exactly the embodiment's registered groups.
    pub fn observe(&self) -> ObservationFrame {
        let observations: BTreeMap<String, Observation> = self
            .spec
            .groups
            .iter()
            .map(|(n, src)| ((*n).to_owned(), self.state.observe(n, *src)))
            .collect();
        ObservationFrame {
            embodiment: self.spec.name.to_owned(),
            observations,
            instruction: self.task.instruction,
            goal: self.task.goal.clone(),
        }
    }

    pub fn done(&self) -> bool {
        self.t >= self.spec.horizon || (self.spec.stop_on_success && self.state.success())
    }

    /// Applies one action row and returns the next frame and the done flag.
    pub fn step(&mut self, action: &[f32]) -> Result<(ObservationFrame, bool)> {
        let dim = self.spec.head.action_dim();
        if action.len() != dim {
            return Err(Error::dim(format!(
                "{} takes {dim}-dimensional {} actions, got {}",
                self.spec.name,
                self.spec.head,
                action.len()
            )));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::Execution(format!(
                "non-finite action for {}",
                self.spec.name
            )));
        }
        if self.done() {
            return Err(Error::Execution(format!(
                "{} episode already finished",
                self.spec.name
            )));
        }
        let a: Vec<f64> = action.iter().map(|&v| v as f64).collect();
        self.state.step(&a);
        self.t += 1;
        Ok((self.observe(), self.done()))
    }

    /// Applies every row of a chunk until the episode ends; returns the
    /// frames produced.
    pub fn step_chunk(&mut self, chunk: &ActionChunk) -> Result<Vec<ObservationFrame>> {
        if chunk.head != self.spec.head {
            return Err(Error::dim(format!(
                "{} cannot execute {} chunks",
                self.spec.name, chunk.head
            )));
        }
        let mut frames = Vec::new();
        for i in 0..chunk.len() {
            let (f, done) = self.step(chunk.row(i))?;
            frames.push(f);
            if done {
                break;
            }
        }
        Ok(frames)
    }

    /// Expert action for the current state, rounded to 32-bit.
    pub fn expert_action(&self) -> Vec<f32> {
        self.state.expert().into_iter().map(|v| v as f32).collect()
    }

    /// The expert's next `len` actions, simulated on a copy.
    pub fn expert_chunk(&self, len: usize) -> Result<ActionChunk> {
        let mut sim = self.clone();
        let mut rows = Vec::with_capacity(len);
        for _ in 0..len {
            let a = sim.expert_action();
            if !sim.done() {
                sim.step(&a)?;
            }
            rows.push(a);
        }
        ActionChunk::from_rows(self.spec.head, &rows)
    }

    pub fn success(&self) -> bool {
        self.state.success()
    }

    /// Quadruped reward of the latest step.
    pub fn reward(&self) -> Option<f64> {
        match &self.state {
            EnvState::Quad(s) => Some(s.last_reward),
            _ => None,
        }
    }
}

pub fn shard_header(spec: &EmbodimentSpec, dataset: &str) -> ShardHeader {
    let streams = spec
        .groups
        .iter()
        .map(|(n, src)| match src {
            GroupSource::Image(_) => StreamSpec::f32(n, &[3, render::SIZE, render::SIZE]),
            GroupSource::Proprio(k) => StreamSpec::f32(n, &[k.dim()]),
        })
        .collect();
    ShardHeader::new(
        dataset,
        spec.name,
        streams,
        spec.head,
        LANGUAGE_VOCAB,
        spec.goal_group,
    )
}

/// Records one expert episode: the observation before each action.
pub fn expert_trajectory(name: &str, seed: u64) -> Result<TrajectoryRecord> {
    let (mut env, mut frame, task) = Env::reset(name, seed)?;
    let mut streams: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut steps = 0;
    while !env.done() {
        for (n, obs) in &frame.observations {
            let data = streams.entry(n.clone()).or_default();
            match obs {
                Observation::Image(img) => data.extend_from_slice(&img.pixels),
                Observation::Proprio(p) => data.extend_from_slice(&p.values),
            }
        }
        let a = env.expert_action();
        streams.entry(ACTIONS.to_owned()).or_default().extend_from_slice(&a);
        frame = env.step(&a)?.0;
        steps += 1;
    }
    Ok(TrajectoryRecord {
        embodiment: name.to_owned(),
        instruction: task.instruction,
        steps,
        streams,
    })
}

/// Seeded expert rollouts as one shard named after the embodiment.
pub fn generate_dataset(name: &str, n: usize, seed: u64) -> Result<DatasetShard> {
    let spec = embodiment(name)?;
    let header = shard_header(spec, name);
    let trajectories = (0..n)
        .map(|i| expert_trajectory(name, derive_seed(seed, stream::DATA_GEN, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetShard {
        header,
        trajectories,
    })
}
