//! Proprioceptive quadruped following a trotting central-pattern generator.

use rand::Rng;

pub const JOINTS: usize = 12;
pub const RATE_LIMIT: f64 = 0.15;
pub const PERIOD: f64 = 20.0;
pub const JOINT_LIMIT: f64 = std::f64::consts::PI;
pub const PROPRIO_DIM: usize = 59;
/// Hip, thigh, calf offsets; hips splay outward on each side.
pub const STANCE: [[f64; 3]; 4] = [
    [0.6, 1.3, -2.5],
    [-0.6, 1.3, -2.5],
    [0.6, 1.3, -2.5],
    [-0.6, 1.3, -2.5],
];
pub const AMPLITUDE: [f64; 3] = [0.1, 0.3, 0.3];
/// Trot: diagonal legs in phase.
pub const LEG_PHASE: [f64; 4] = [0.0, std::f64::consts::PI, std::f64::consts::PI, 0.0];

/// CPG reference joint positions at clock `c`.
pub fn reference(c: u64) -> [f64; JOINTS] {
    let mut q = [0.0; JOINTS];
    for leg in 0..4 {
        let s = (std::f64::consts::TAU * c as f64 / PERIOD + LEG_PHASE[leg]).sin();
        for j in 0..3 {
            q[3 * leg + j] = STANCE[leg][j] + AMPLITUDE[j] * s;
        }
    }
    q
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadState {
    pub q: [f64; JOINTS],
    pub vel: [f64; JOINTS],
    pub prev_action: [f64; JOINTS],
    pub clock: u64,
    pub last_reward: f64,
}

impl QuadState {
    pub fn reset(rng: &mut impl Rng) -> Self {
        let clock = rng.gen_range(0..PERIOD as u64);
        let q = reference(clock);
        Self {
            q,
            vel: [0.0; JOINTS],
            prev_action: q,
            clock,
            last_reward: 1.0,
        }
    }

    pub fn step(&mut self, a: &[f64]) {
        let before = self.q;
        for (i, q) in self.q.iter_mut().enumerate() {
            *q = (*q + (a[i] - *q).clamp(-RATE_LIMIT, RATE_LIMIT)).clamp(-JOINT_LIMIT, JOINT_LIMIT);
        }
        for i in 0..JOINTS {
            self.vel[i] = self.q[i] - before[i];
            self.prev_action[i] = a[i];
        }
        self.clock += 1;
        self.last_reward = self.reward();
    }

    /// `exp(-|q - ref(clock)|_1 / 12)`.
    pub fn reward(&self) -> f64 {
        let r = reference(self.clock);
        let l1: f64 = self.q.iter().zip(&r).map(|(q, r)| (q - r).abs()).sum();
        (-l1 / JOINTS as f64).exp()
    }

    pub fn expert(&self) -> Vec<f64> {
        reference(self.clock + 1).to_vec()
    }

    /// 12 positions, 12 velocities, 12 previous commands, gravity, two
    /// gait-phase harmonics as sin/cos, 16 zeros.
    pub fn proprio(&self) -> Vec<f32> {
        let mut p = Vec::with_capacity(PROPRIO_DIM);
        p.extend(self.q.iter().map(|&v| v as f32));
        p.extend(self.vel.iter().map(|&v| v as f32));
        p.extend(self.prev_action.iter().map(|&v| v as f32));
        p.extend([0.0, 0.0, -1.0]);
        let w = std::f64::consts::TAU * self.clock as f64 / PERIOD;
        p.extend([w.sin(), w.cos(), (2.0 * w).sin(), (2.0 * w).cos()].map(|v| v as f32));
        p.resize(PROPRIO_DIM, 0.0);
        p
    }
}
