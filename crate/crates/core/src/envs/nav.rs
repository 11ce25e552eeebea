//! Point robot navigation on the unit square with wall maps.

use rand::Rng;

use super::render::{Canvas, SIZE};
use crate::encoders::{ImageObservation, ViewKind};

pub const SUCCESS_RADIUS: f64 = 0.1;
pub const ROBOT_RADIUS: f64 = 0.03;
/// Largest expert waypoint.
pub const EXPERT_STEP: f64 = 0.15;
const MIN_START_GOAL: f64 = 0.5;

/// `[x0, x1, y0, y1]` wall rectangles per map id.
pub const MAPS: [&[[f64; 4]]; 4] = [
    &[],
    &[[0.45, 0.55, 0.0, 0.6]],
    &[[0.3, 1.0, 0.45, 0.55]],
    &[[0.2, 0.4, 0.2, 0.4], [0.6, 0.8, 0.6, 0.8]],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavDynamics {
    pub max_step: f64,
    pub drift: [f64; 2],
}

impl NavDynamics {
    pub const NAV: NavDynamics = NavDynamics {
        max_step: 0.2,
        drift: [0.0, 0.0],
    };
    pub const SHIFTED: NavDynamics = NavDynamics {
        max_step: 0.12,
        drift: [0.02, 0.0],
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavState {
    pub pos: [f64; 2],
    pub goal: [f64; 2],
    pub map: usize,
    pub dynamics: NavDynamics,
}

pub fn blocked(map: usize, p: [f64; 2]) -> bool {
    if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
        return true;
    }
    MAPS[map].iter().any(|w| {
        p[0] >= w[0] - ROBOT_RADIUS
            && p[0] <= w[1] + ROBOT_RADIUS
            && p[1] >= w[2] - ROBOT_RADIUS
            && p[1] <= w[3] + ROBOT_RADIUS
    })
}

pub fn segment_clear(map: usize, a: [f64; 2], b: [f64; 2]) -> bool {
    const SAMPLES: usize = 24;
    (0..=SAMPLES).all(|i| {
        let s = i as f64 / SAMPLES as f64;
        !blocked(map, [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])])
    })
}

impl NavState {
    /// Start and goal with a clear straight path at least 0.3 apart.
    pub fn reset(dynamics: NavDynamics, rng: &mut impl Rng) -> Self {
        let map = rng.gen_range(0..MAPS.len());
        loop {
            let s: [f64; 2] = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let g = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            if (s[0] - g[0]).hypot(s[1] - g[1]) >= MIN_START_GOAL && segment_clear(map, s, g) {
                return Self {
                    pos: s,
                    goal: g,
                    map,
                    dynamics,
                };
            }
        }
    }

    /// Moves by the waypoint (norm-clamped) plus drift; a blocked move
    /// slides along one axis or stays put.
    pub fn step(&mut self, a: &[f64]) {
        let n = a[0].hypot(a[1]);
        let s = if n > self.dynamics.max_step {
            self.dynamics.max_step / n
        } else {
            1.0
        };
        let d = self.dynamics.drift;
        let t = [
            (self.pos[0] + a[0] * s + d[0]).clamp(0.0, 1.0),
            (self.pos[1] + a[1] * s + d[1]).clamp(0.0, 1.0),
        ];
        for cand in [t, [t[0], self.pos[1]], [self.pos[0], t[1]]] {
            if segment_clear(self.map, self.pos, cand) {
                self.pos = cand;
                return;
            }
        }
    }

    /// Straight-line waypoint toward the goal, compensating known drift.
    pub fn expert(&self) -> Vec<f64> {
        let step = EXPERT_STEP.min(self.dynamics.max_step);
        let d = [
            self.goal[0] - self.pos[0] - self.dynamics.drift[0],
            self.goal[1] - self.pos[1] - self.dynamics.drift[1],
        ];
        let n = d[0].hypot(d[1]);
        if n == 0.0 {
            return vec![0.0, 0.0];
        }
        let s = step.min(n) / n;
        vec![d[0] * s, d[1] * s]
    }

    pub fn distance(&self) -> f64 {
        (self.pos[0] - self.goal[0]).hypot(self.pos[1] - self.goal[1])
    }

    pub fn success(&self) -> bool {
        self.distance() <= SUCCESS_RADIUS
    }

    pub fn render(&self) -> ImageObservation {
        let mut c = Canvas::new(ViewKind::Navigation);
        let k = SIZE as f64;
        for w in MAPS[self.map] {
            c.fill_box(0, w[0] * k, w[1] * k, w[2] * k, w[3] * k, 1.0);
        }
        c.square(2, self.goal[0] * k, self.goal[1] * k, 1.0, 1.0);
        c.square(1, self.pos[0] * k, self.pos[1] * k, 1.0, 1.0);
        c.finish()
    }

    pub fn goal_state(&self) -> Self {
        Self {
            pos: self.goal,
            ..self.clone()
        }
    }
}
