//! Deterministic synthetic operating-field scenes.
//!
//! Each scene has a textured tissue background (class 0), one or more
//! elliptical organs (class 1), polygonal instruments (class 2) and a thin
//! thread curve (class 3). Classes past 3 are rendered as small clamp-like
//! blobs. Every class draws from its own colour family with per-scene
//! lighting jitter and per-pixel noise.

mod io;
mod render;

pub use io::{
    load_image, load_manifest, load_mask, read_manifest, save_image, save_mask, write_manifest,
    ManifestEntry, MANIFEST_FILE,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::{stream_rng, streams};
use crate::tensor::Tensor;

pub const BACKGROUND: u32 = 0;
pub const ORGAN: u32 = 1;
pub const INSTRUMENT: u32 = 2;
pub const THREAD: u32 = 3;

/// Human-readable class names for the default palette.
pub fn class_name(class: usize) -> String {
    match class {
        0 => "background".into(),
        1 => "organ".into(),
        2 => "instrument".into(),
        3 => "thread".into(),
        c => format!("clamp-{}", c - 3),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub thin_structure_width: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_samples: 200,
            height: 64,
            width: 64,
            num_classes: 4,
            seed: 0,
            thin_structure_width: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height != self.width {
            return Err(Error::Config(format!(
                "images must be square, got {}x{}",
                self.height, self.width
            )));
        }
        if !self.height.is_power_of_two() || self.height < 2 {
            return Err(Error::Config(format!(
                "image side {} is not a power of two",
                self.height
            )));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.thin_structure_width == 0 {
            return Err(Error::Config("thin_structure_width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: Mask,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

pub fn generate_scene(config: &DatasetConfig, index: usize) -> Result<SceneSample> {
    config.validate()?;
    if index >= config.num_samples {
        return Err(Error::Argument(format!(
            "scene index {index} out of range for {} samples",
            config.num_samples
        )));
    }
    let (image, mask) = render::render_scene(config, index as u64);
    Ok(SceneSample {
        id: scene_id(index),
        image,
        mask,
    })
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<SceneSample>> {
    (0..config.num_samples)
        .map(|i| generate_scene(config, i))
        .collect()
}

/// Deterministic random train/validation partition.
///
/// The validation part holds `round(val_fraction · N)` items.
pub fn split_dataset<T>(items: Vec<T>, val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Argument("cannot split an empty dataset".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = items.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, streams::SPLIT));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let val = order[..n_val]
        .iter()
        .map(|&i| slots[i].take().expect("index used once"))
        .collect();
    let train = order[n_val..]
        .iter()
        .map(|&i| slots[i].take().expect("index used once"))
        .collect();
    Ok((train, val))
}
