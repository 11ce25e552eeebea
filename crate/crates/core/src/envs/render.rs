//! Procedural 24x24 sprites with area-weighted edges, so sub-pixel
//! positions stay visible to the encoder.

use crate::encoders::{ImageObservation, ViewKind};

pub const SIZE: usize = 24;

pub struct Canvas {
    view: ViewKind,
    px: Vec<f32>,
}

impl Canvas {
    pub fn new(view: ViewKind) -> Self {
        Self {
            view,
            px: vec![0.0; 3 * SIZE * SIZE],
        }
    }

    /// Adds `value` times the coverage of the axis-aligned box
    /// `[x0, x1] x [y0, y1]` (pixel units, x right, y down) to channel `ch`.
    pub fn fill_box(&mut self, ch: usize, x0: f64, x1: f64, y0: f64, y1: f64, value: f32) {
        let lo = |v: f64| v.floor().max(0.0) as usize;
        let hi = |v: f64| (v.ceil().max(0.0) as usize).min(SIZE);
        for y in lo(y0)..hi(y1) {
            let cy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
            for x in lo(x0)..hi(x1) {
                let cx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                self.px[ch * SIZE * SIZE + y * SIZE + x] += value * (cx * cy) as f32;
            }
        }
    }

    /// Square of half-width `half` centred on pixel coordinate `(x, y)`.
    pub fn square(&mut self, ch: usize, x: f64, y: f64, half: f64, value: f32) {
        self.fill_box(ch, x - half, x + half, y - half, y + half, value);
    }

    /// Overwrites row `row` of channel `ch` with a bar covering `frac` of
    /// the row's `width` leading pixels (fractional last pixel).
    pub fn bar(&mut self, ch: usize, row: usize, start: usize, width: usize, frac: f64) {
        let len = frac.clamp(0.0, 1.0) * width as f64;
        for i in 0..width {
            let v = (len - i as f64).clamp(0.0, 1.0) as f32;
            self.px[ch * SIZE * SIZE + row * SIZE + start + i] = v;
        }
    }

    pub fn set(&mut self, ch: usize, x: usize, y: usize, value: f32) {
        self.px[ch * SIZE * SIZE + y * SIZE + x] = value;
    }

    pub fn finish(mut self) -> ImageObservation {
        for v in &mut self.px {
            *v = v.clamp(0.0, 1.0);
        }
        ImageObservation::new(self.view, SIZE, self.px).expect("canvas has the image shape")
    }
}
