//! Single-arm pick-and-place on a unit table.

use rand::Rng;

use super::render::Canvas;
use crate::encoders::{ImageObservation, ViewKind};

pub const MAX_DELTA: f64 = 0.1;
pub const ATTACH_RADIUS: f64 = 0.05;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const MIN_SEPARATION: f64 = 0.15;
/// Expert closes the gripper once this close to the object.
const EXPERT_GRASP: f64 = 0.04;
const AT_GOAL: f64 = 1e-6;
const WRIST_SCALE: f64 = 40.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ArmState {
    pub ee: [f64; 3],
    pub object: [f64; 3],
    pub goal: [f64; 2],
    pub grip: f64,
    pub attached: bool,
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl ArmState {
    pub fn reset(rng: &mut impl Rng) -> Self {
        let ee = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.3..0.7)];
        loop {
            let o: [f64; 2] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let g = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            if (o[0] - g[0]).hypot(o[1] - g[1]) >= MIN_SEPARATION {
                return Self {
                    ee,
                    object: [o[0], o[1], 0.0],
                    goal: g,
                    grip: 0.0,
                    attached: false,
                };
            }
        }
    }

    fn goal3(&self) -> [f64; 3] {
        [self.goal[0], self.goal[1], 0.0]
    }

    /// `a = [dx, dy, dz, r1, r2, r3, grip]`; rotations are inert.
    pub fn step(&mut self, a: &[f64]) {
        for i in 0..3 {
            self.ee[i] = (self.ee[i] + a[i].clamp(-MAX_DELTA, MAX_DELTA)).clamp(0.0, 1.0);
        }
        self.grip = a[6];
        if self.grip >= 0.5 {
            if !self.attached && dist3(self.ee, self.object) <= ATTACH_RADIUS {
                self.attached = true;
            }
        } else if self.attached {
            self.attached = false;
            self.object[2] = 0.0;
        }
        if self.attached {
            self.object = self.ee;
        }
    }

    pub fn expert(&self) -> Vec<f64> {
        let (target, grip_at) = if self.attached {
            (self.goal3(), None)
        } else {
            ([self.object[0], self.object[1], 0.0], Some(self.object))
        };
        if self.attached && dist3(self.ee, target) <= AT_GOAL {
            return vec![0.0; 7];
        }
        let mut a = vec![0.0; 7];
        let mut next = self.ee;
        for i in 0..3 {
            a[i] = (target[i] - self.ee[i]).clamp(-MAX_DELTA, MAX_DELTA);
            next[i] += a[i];
        }
        a[6] = match grip_at {
            Some(obj) => f64::from(u8::from(dist3(next, obj) <= EXPERT_GRASP)),
            None => 1.0,
        };
        a
    }

    pub fn success(&self) -> bool {
        !self.attached
            && (self.object[0] - self.goal[0]).hypot(self.object[1] - self.goal[1]) <= SUCCESS_RADIUS
    }

    /// The demonstrations' last observed state: object held at the goal.
    pub fn goal_state(&self) -> Self {
        let g = self.goal3();
        Self {
            ee: g,
            object: g,
            goal: self.goal,
            grip: 1.0,
            attached: true,
        }
    }

    fn indicators(&self, c: &mut Canvas) {
        c.bar(0, 0, 0, 20, self.ee[2]);
        for x in 20..24 {
            c.set(1, x, 0, if self.grip >= 0.5 { 1.0 } else { 0.0 });
        }
    }

    /// Top-down table view; row 0 carries EE height and gripper state.
    pub fn render_workspace(&self) -> ImageObservation {
        let mut c = Canvas::new(ViewKind::Workspace);
        let p = |v: f64| 2.0 + v * 21.0;
        c.square(2, p(self.goal[0]), p(self.goal[1]), 1.0, 1.0);
        c.square(1, p(self.object[0]), p(self.object[1]), 1.0, 1.0);
        c.square(0, p(self.ee[0]), p(self.ee[1]), 1.0, 1.0);
        self.indicators(&mut c);
        c.finish()
    }

    /// Egocentric view centred on the end effector.
    pub fn render_wrist(&self) -> ImageObservation {
        let mut c = Canvas::new(ViewKind::WristLeft);
        let px = |v: f64, e: f64| 12.0 + (v - e) * WRIST_SCALE;
        c.square(2, px(self.goal[0], self.ee[0]), px(self.goal[1], self.ee[1]), 1.5, 1.0);
        c.square(1, px(self.object[0], self.ee[0]), px(self.object[1], self.ee[1]), 1.5, 1.0);
        self.indicators(&mut c);
        c.finish()
    }
}
