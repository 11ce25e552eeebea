//! Two 7-joint arms tracking an instruction-keyed reference motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::Canvas;
use crate::encoders::{ImageObservation, ViewKind};

pub const JOINTS: usize = 14;
pub const RATE_LIMIT: f64 = 0.15;
pub const HORIZON: usize = 60;
pub const SUCCESS_WINDOW: usize = 10;
pub const SUCCESS_TOL: f64 = 0.05;
pub const INIT_NOISE: f64 = 0.05;
pub const JOINT_LIMIT: f64 = std::f64::consts::PI;

/// Per joint: offset plus three sinusoids of 1, 2 and 3 cycles per
/// episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    offset: [f64; JOINTS],
    amp: [[f64; 3]; JOINTS],
    phase: [[f64; 3]; JOINTS],
}

impl Reference {
    pub fn for_instruction(id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0xB1_0000 + id as u64);
        let mut r = Self {
            offset: [0.0; JOINTS],
            amp: [[0.0; 3]; JOINTS],
            phase: [[0.0; 3]; JOINTS],
        };
        for j in 0..JOINTS {
            r.offset[j] = rng.gen_range(-0.3..0.3);
            for m in 0..3 {
                r.amp[j][m] = rng.gen_range(0.03..0.12);
                r.phase[j][m] = rng.gen_range(0.0..std::f64::consts::TAU);
            }
        }
        r
    }

    pub fn at(&self, t: usize) -> [f64; JOINTS] {
        let mut q = self.offset;
        for (j, qj) in q.iter_mut().enumerate() {
            for m in 0..3 {
                let w = std::f64::consts::TAU * (m + 1) as f64 / HORIZON as f64;
                *qj += self.amp[j][m] * (w * t as f64 + self.phase[j][m]).sin();
            }
        }
        q
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BimanualState {
    pub q: [f64; JOINTS],
    pub t: usize,
    pub instruction: u32,
    reference: Reference,
    /// Mean absolute tracking error after each step.
    pub errors: Vec<f64>,
}

impl BimanualState {
    pub fn reset(instruction: u32, rng: &mut impl Rng) -> Self {
        let reference = Reference::for_instruction(instruction);
        let mut q = reference.at(0);
        for v in &mut q {
            *v += rng.gen_range(-INIT_NOISE..=INIT_NOISE);
        }
        Self {
            q,
            t: 0,
            instruction,
            reference,
            errors: Vec::new(),
        }
    }

    pub fn reference(&self) -> &Reference {
        &self.reference
    }

    pub fn step(&mut self, a: &[f64]) {
        for (q, &c) in self.q.iter_mut().zip(a) {
            *q = (*q + (c - *q).clamp(-RATE_LIMIT, RATE_LIMIT)).clamp(-JOINT_LIMIT, JOINT_LIMIT);
        }
        self.t += 1;
        let r = self.reference.at(self.t);
        let err = self.q.iter().zip(&r).map(|(q, r)| (q - r).abs()).sum::<f64>() / JOINTS as f64;
        self.errors.push(err);
    }

    pub fn expert(&self) -> Vec<f64> {
        self.reference.at(self.t + 1).to_vec()
    }

    /// Mean tracking error over the last 10 steps below 0.05 rad.
    pub fn success(&self) -> bool {
        if self.errors.len() < SUCCESS_WINDOW {
            return false;
        }
        let tail = &self.errors[self.errors.len() - SUCCESS_WINDOW..];
        tail.iter().sum::<f64>() / (SUCCESS_WINDOW as f64) < SUCCESS_TOL
    }

    /// One arm's joints as markers, with the episode phase in rows 0-1.
    pub fn render(&self, view: ViewKind) -> ImageObservation {
        let joints = match view {
            ViewKind::WristRight => &self.q[7..],
            _ => &self.q[..7],
        };
        let mut c = Canvas::new(view);
        let phase = (self.t as f64 / HORIZON as f64).min(1.0) as f32;
        for y in 0..2 {
            for x in 0..24 {
                c.set(1, x, y, phase);
            }
        }
        for (i, &q) in joints.iter().enumerate() {
            let x = 12.0 + q * 10.0;
            let y = 3.0 + 3.0 * i as f64;
            c.fill_box(0, x - 1.0, x + 1.0, y, y + 2.0, 1.0);
        }
        c.finish()
    }

    pub fn proprio(&self) -> Vec<f32> {
        self.q.iter().map(|&v| v as f32).collect()
    }
}
