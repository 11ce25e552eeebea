use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::ImageObservation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Largest pad-and-crop shift in pixels.
    pub max_shift: usize,
    /// Contrast factor range `1 ± contrast`.
    pub contrast: f32,
    /// Brightness offset range `± brightness`.
    pub brightness: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_shift: 2,
            contrast: 0.1,
            brightness: 0.1,
        }
    }
}

/// One concrete augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub dx: i32,
    pub dy: i32,
    pub contrast: f32,
    pub brightness: f32,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        dx: 0,
        dy: 0,
        contrast: 1.0,
        brightness: 0.0,
    };

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let s = cfg.max_shift as i32;
        let uniform = |rng: &mut dyn rand::RngCore, r: f32| {
            if r > 0.0 {
                rng.gen_range(-r..=r)
            } else {
                0.0
            }
        };
        Self {
            dx: rng.gen_range(-s..=s),
            dy: rng.gen_range(-s..=s),
            contrast: 1.0 + uniform(rng, cfg.contrast),
            brightness: uniform(rng, cfg.brightness),
        }
    }

    /// Pad-and-crop shift (zero fill), then `clamp(c * x + b, 0, 1)`.
    pub fn apply(&self, img: &ImageObservation) -> ImageObservation {
        let n = img.size as i32;
        let plane = img.size * img.size;
        let mut out = img.clone();
        for (c, dst) in out.pixels.chunks_exact_mut(plane).enumerate() {
            let src = &img.pixels[c * plane..(c + 1) * plane];
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = (y + self.dy, x + self.dx);
                    let v = if (0..n).contains(&sy) && (0..n).contains(&sx) {
                        src[(sy * n + sx) as usize]
                    } else {
                        0.0
                    };
                    dst[(y * n + x) as usize] = (self.contrast * v + self.brightness).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// Draws fresh parameters and applies them to `img`.
pub fn augment(img: &ImageObservation, cfg: &AugmentConfig, rng: &mut impl Rng) -> ImageObservation {
    AugmentParams::draw(cfg, rng).apply(img)
}
