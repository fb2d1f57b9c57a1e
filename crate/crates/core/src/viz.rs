//! Mask colouring, overlays and false-positive / false-negative maps.
//!
//! Palette (RGB):
//!
//! | class          | colour          |
//! |----------------|-----------------|
//! | 0 background   | black           |
//! | 1 organ        | (0, 200, 0)     |
//! | 2 instrument   | (0, 120, 255)   |
//! | 3 thread       | (255, 230, 0)   |
//! | 4 and above    | golden-angle hue wheel |
//!
//! Error map: red where a non-background class is predicted wrongly (false
//! positive), blue where a non-background ground-truth pixel is missed
//! (false negative), magenta when both hold, dimmed grey image elsewhere.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];
pub const BOTH_COLOR: [u8; 3] = [255, 0, 255];

pub fn class_color(class: u32) -> [u8; 3] {
    match class {
        0 => [0, 0, 0],
        1 => [0, 200, 0],
        2 => [0, 120, 255],
        3 => [255, 230, 0],
        c => {
            let h = (c as f64 * 137.508) % 360.0;
            hsv(h, 0.8, 0.95)
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

fn to_unit(c: [u8; 3]) -> [f32; 3] {
    c.map(|v| v as f32 / 255.0)
}

fn check(image: &Tensor<f32>, mask: &Mask) -> Result<()> {
    let (h, w, c) = image.dims3();
    if (h, w) != (mask.height(), mask.width()) || c != 3 {
        return Err(Error::Shape(format!(
            "image {h}x{w}x{c} does not match mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Solid palette rendering of a mask, `H×W×3`.
pub fn colorize(mask: &Mask) -> Tensor<f32> {
    let mut data = Vec::with_capacity(mask.len() * 3);
    for &c in mask.data() {
        data.extend(to_unit(class_color(c)));
    }
    Tensor::from_vec(&[mask.height(), mask.width(), 3], data).expect("shape")
}

/// Half-transparent class colours over the image; background shows through.
pub fn overlay(image: &Tensor<f32>, mask: &Mask) -> Result<Tensor<f32>> {
    check(image, mask)?;
    let mut out = image.clone();
    for (px, &c) in out.data_mut().chunks_mut(3).zip(mask.data()) {
        if c != 0 {
            let col = to_unit(class_color(c));
            for k in 0..3 {
                px[k] = 0.5 * px[k] + 0.5 * col[k];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    /// Pixels with `pred != gt` and `pred != 0`; equals `Σ_{c≥1} fp_c`.
    pub false_positive: u64,
    /// Pixels with `pred != gt` and `gt != 0`; equals `Σ_{c≥1} fn_c`.
    pub false_negative: u64,
}

pub fn error_map(image: &Tensor<f32>, pred: &Mask, gt: &Mask) -> Result<(Tensor<f32>, ErrorCounts)> {
    check(image, gt)?;
    if pred.len() != gt.len() {
        return Err(Error::Argument("prediction and ground truth differ in size".into()));
    }
    let mut counts = ErrorCounts::default();
    let mut out = image.clone();
    for ((px, &p), &g) in out.data_mut().chunks_mut(3).zip(pred.data()).zip(gt.data()) {
        let fp = p != g && p != 0;
        let fneg = p != g && g != 0;
        counts.false_positive += fp as u64;
        counts.false_negative += fneg as u64;
        let col = match (fp, fneg) {
            (true, true) => Some(BOTH_COLOR),
            (true, false) => Some(FP_COLOR),
            (false, true) => Some(FN_COLOR),
            (false, false) => None,
        };
        match col {
            Some(c) => px.copy_from_slice(&to_unit(c)),
            None => {
                let grey = 0.3 * (px[0] + px[1] + px[2]) / 3.0;
                px.fill(grey);
            }
        }
    }
    Ok((out, counts))
}
