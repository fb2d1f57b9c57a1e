use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetConfig, BACKGROUND, INSTRUMENT, ORGAN, THREAD};
use crate::mask::Mask;
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Tensor;

const SCENE_STREAM: u64 = 0x5CE0;
const PIXEL_NOISE: f32 = 0.035;

type Rgb = [f32; 3];

struct Canvas {
    side: usize,
    color: Vec<Rgb>,
    mask: Vec<u32>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, class: u32, rgb: Rgb) {
        let i = y * self.side + x;
        self.color[i] = rgb;
        self.mask[i] = class;
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: Rgb, amount: f32) -> Rgb {
    base.map(|c| c + rng.random_range(-amount..amount))
}

fn scale(rgb: Rgb, s: f32) -> Rgb {
    rgb.map(|c| c * s)
}

/// Hue-spread colour for the optional clamp classes.
fn extra_class_color(class: u32) -> Rgb {
    let h = (class as f32 * 0.173).fract() * 6.0;
    let (s, v) = (0.7f32, 0.85f32);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub(super) fn render_scene(config: &DatasetConfig, index: u64) -> (Tensor<f32>, Mask) {
    let side = config.side();
    let s = side as f32;
    let k = config.num_classes as u32;
    let mut rng = stream_rng(derive_seed(config.seed, SCENE_STREAM), index);
    let lighting = rng.random_range(0.85f32..1.1);

    let mut canvas = Canvas {
        side,
        color: vec![[0.0; 3]; side * side],
        mask: vec![BACKGROUND; side * side],
    };

    // tissue background: two interfering sinusoids over a pink base
    let tissue = jitter(&mut rng, [0.78, 0.42, 0.40], 0.05);
    let waves: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            let freq = rng.random_range(4.0f32..12.0) * 2.0 * PI / s;
            let angle = rng.random_range(0.0f32..PI);
            (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0f32..2.0 * PI), 0.06)
        })
        .collect();
    for y in 0..side {
        for x in 0..side {
            let t: f32 = waves
                .iter()
                .map(|&(fx, fy, p, a)| a * (fx * x as f32 + fy * y as f32 + p).sin())
                .sum();
            canvas.paint(y, x, BACKGROUND, scale(tissue, 1.0 + t));
        }
    }

    // organs: shaded ellipses
    let organs = 1 + usize::from(rng.random_bool(0.4));
    for _ in 0..organs {
        let base = jitter(&mut rng, [0.50, 0.13, 0.16], 0.04);
        let cx = rng.random_range(0.2..0.8) * s;
        let cy = rng.random_range(0.2..0.8) * s;
        let a = rng.random_range(0.12..0.28) * s;
        let b = rng.random_range(0.12..0.28) * s;
        let theta = rng.random_range(0.0..PI);
        let (sin, cos) = theta.sin_cos();
        for y in 0..side {
            for x in 0..side {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let d2 = u * u + v * v;
                if d2 <= 1.0 {
                    canvas.paint(y, x, ORGAN, scale(base, 1.0 - 0.25 * d2));
                }
            }
        }
    }

    // instruments: a shaft entering from the border with a flared jaw
    if k > INSTRUMENT {
        let count = 1 + usize::from(rng.random_bool(0.5));
        for _ in 0..count {
            let base = jitter(&mut rng, [0.68, 0.70, 0.74], 0.04);
            let along_border = rng.random_range(0.1..0.9) * s;
            let (sx, sy) = match rng.random_range(0..4) {
                0 => (along_border, 0.0),
                1 => (s, along_border),
                2 => (along_border, s),
                _ => (0.0, along_border),
            };
            let tx = rng.random_range(0.3..0.7) * s;
            let ty = rng.random_range(0.3..0.7) * s;
            let norm = ((tx - sx).powi(2) + (ty - sy).powi(2)).sqrt().max(1e-3);
            let (ux, uy) = ((tx - sx) / norm, (ty - sy) / norm);
            let length = rng.random_range(0.45..0.75) * s;
            let half_width = rng.random_range(0.035..0.06) * s;
            let jaw = rng.random_range(0.08..0.14) * s;
            for y in 0..side {
                for x in 0..side {
                    let px = x as f32 + 0.5 - sx;
                    let py = y as f32 + 0.5 - sy;
                    let along = px * ux + py * uy;
                    let perp = -px * uy + py * ux;
                    let limit = if (0.0..=length).contains(&along) {
                        half_width
                    } else if along > length && along <= length + jaw {
                        half_width * (1.0 + 0.8 * (along - length) / jaw)
                    } else {
                        continue;
                    };
                    if perp.abs() <= limit {
                        let glint = 0.15 * (-(perp / (0.5 * half_width)).powi(2)).exp();
                        canvas.paint(y, x, INSTRUMENT, scale(base, 1.0 + glint));
                    }
                }
            }
        }
    }

    // clamp-like blobs for any classes past the thread
    for class in (THREAD + 1)..k {
        let base = extra_class_color(class);
        let cx = rng.random_range(0.15..0.85) * s;
        let cy = rng.random_range(0.15..0.85) * s;
        let a = rng.random_range(0.05..0.09) * s;
        let b = rng.random_range(0.05..0.09) * s;
        for y in 0..side {
            for x in 0..side {
                let u = (x as f32 + 0.5 - cx) / a;
                let v = (y as f32 + 0.5 - cy) / b;
                if u * u + v * v <= 1.0 {
                    canvas.paint(y, x, class, base);
                }
            }
        }
    }

    // thread: quadratic Bézier drawn with a square pen
    if k > THREAD {
        let base = jitter(&mut rng, [0.30, 0.22, 0.62], 0.04);
        let pts: Vec<(f32, f32)> = (0..3)
            .map(|_| (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s))
            .collect();
        let pen = config.thin_structure_width as isize;
        let lo = -(pen - 1) / 2;
        let steps = 8 * side;
        for i in 0..=steps {
            let t = i as f32 / steps as f32;
            let w0 = (1.0 - t) * (1.0 - t);
            let w1 = 2.0 * (1.0 - t) * t;
            let w2 = t * t;
            let px = w0 * pts[0].0 + w1 * pts[1].0 + w2 * pts[2].0;
            let py = w0 * pts[0].1 + w1 * pts[1].1 + w2 * pts[2].1;
            for oy in lo..lo + pen {
                for ox in lo..lo + pen {
                    let y = py.floor() as isize + oy;
                    let x = px.floor() as isize + ox;
                    if (0..side as isize).contains(&y) && (0..side as isize).contains(&x) {
                        canvas.paint(y as usize, x as usize, THREAD, base);
                    }
                }
            }
        }
    }

    if !canvas.mask.contains(&BACKGROUND) {
        canvas.paint(0, 0, BACKGROUND, tissue);
    }

    let noise = Normal::new(0.0f32, PIXEL_NOISE).expect("valid sigma");
    let mut data = Vec::with_capacity(side * side * 3);
    for rgb in &canvas.color {
        for &c in rgb {
            data.push((c * lighting + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    let image = Tensor::from_vec(&[side, side, 3], data).expect("image shape");
    let mask = Mask::new(side, side, canvas.mask).expect("mask shape");
    (image, mask)
}
