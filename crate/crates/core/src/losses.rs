//! Segmentation losses, the curriculum factor and the hybrid objective.

use serde::{Deserialize, Serialize};

use crate::decoder::{softmax_pixelwise, LogitMap, ProbMap};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_dice: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_ce: 1.0,
            w_dice: 1.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_ce < 0.0 || self.w_dice < 0.0 || self.dice_smooth < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.w_ce + self.w_dice <= 0.0 {
            return Err(Error::Config("w_ce + w_dice must be positive".into()));
        }
        Ok(())
    }
}

fn check<T: Scalar>(probs: &Tensor<T>, gt: &Mask) -> Result<(usize, usize)> {
    let (k, h, w) = probs.dims3();
    if (h, w) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction is {h}x{w}, ground truth is {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    gt.check_classes(k)?;
    Ok((k, h * w))
}

/// Mean over pixels of `-ln p[gt]`, with `p` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy<T: Scalar>(probs: &ProbMap<T>, gt: &Mask) -> Result<T> {
    let (_, hw) = check(&probs.probs, gt)?;
    let p = probs.probs.data();
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let total: T = gt
        .data()
        .iter()
        .enumerate()
        .map(|(i, &c)| -p[c as usize * hw + i].max(floor).ln())
        .sum();
    Ok(total / T::from_usize(hw).expect("pixel count"))
}

struct DiceTerms<T> {
    intersection: Vec<T>,
    pred_mass: Vec<T>,
    gt_mass: Vec<T>,
}

fn dice_terms<T: Scalar>(p: &[T], gt: &Mask, k: usize, hw: usize) -> DiceTerms<T> {
    let mut t = DiceTerms {
        intersection: vec![T::zero(); k],
        pred_mass: vec![T::zero(); k],
        gt_mass: vec![T::zero(); k],
    };
    for c in 0..k {
        t.pred_mass[c] = p[c * hw..(c + 1) * hw].iter().copied().sum();
    }
    for (i, &c) in gt.data().iter().enumerate() {
        let c = c as usize;
        t.intersection[c] += p[c * hw + i];
        t.gt_mass[c] += T::one();
    }
    t
}

/// Soft Dice loss `1 - mean_c (2 Σ p·g + ε) / (Σ p + Σ g + ε)` over all classes.
pub fn dice_loss<T: Scalar>(probs: &ProbMap<T>, gt: &Mask, smooth: f64) -> Result<T> {
    let (k, hw) = check(&probs.probs, gt)?;
    let t = dice_terms(probs.probs.data(), gt, k, hw);
    let eps = T::from_f64_lossy(smooth);
    let two = T::from_f64_lossy(2.0);
    let mean: T = (0..k)
        .map(|c| (two * t.intersection[c] + eps) / (t.pred_mass[c] + t.gt_mass[c] + eps))
        .sum::<T>()
        / T::from_usize(k).expect("classes");
    Ok(T::one() - mean)
}

pub fn seg_loss<T: Scalar>(probs: &ProbMap<T>, gt: &Mask, weights: &LossWeights) -> Result<T> {
    let mut total = T::zero();
    if weights.w_ce != 0.0 {
        total += T::from_f64_lossy(weights.w_ce) * cross_entropy(probs, gt)?;
    }
    if weights.w_dice != 0.0 {
        total += T::from_f64_lossy(weights.w_dice) * dice_loss(probs, gt, weights.dice_smooth)?;
    }
    Ok(total)
}

/// Gradient of a scalar loss through the pixelwise softmax:
/// `dz_k = p_k (dp_k - Σ_j p_j dp_j)`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let (k, h, w) = probs.dims3();
    let hw = h * w;
    let p = probs.data();
    let dp = dprobs.data();
    let mut dz = vec![T::zero(); p.len()];
    for i in 0..hw {
        let mut dot = T::zero();
        for c in 0..k {
            dot += p[c * hw + i] * dp[c * hw + i];
        }
        for c in 0..k {
            dz[c * hw + i] = p[c * hw + i] * (dp[c * hw + i] - dot);
        }
    }
    Tensor::from_vec(&[k, h, w], dz).expect("softmax grad shape")
}

/// Segmentation loss on `softmax(logits)` and its gradient w.r.t. the logits.
pub fn seg_loss_with_grad<T: Scalar>(
    logits: &LogitMap<T>,
    gt: &Mask,
    weights: &LossWeights,
) -> Result<(T, ProbMap<T>, Tensor<T>)> {
    let probs = softmax_pixelwise(logits)?;
    let (k, hw) = check(&probs.probs, gt)?;
    let p = probs.probs.data();
    let mut dp = vec![T::zero(); p.len()];
    let n = T::from_usize(hw).expect("pixels");
    let floor = T::from_f64_lossy(PROB_FLOOR);

    if weights.w_ce != 0.0 {
        let w = T::from_f64_lossy(weights.w_ce);
        for (i, &c) in gt.data().iter().enumerate() {
            let idx = c as usize * hw + i;
            if p[idx] > floor {
                dp[idx] -= w / (n * p[idx]);
            }
        }
    }
    if weights.w_dice != 0.0 {
        let w = T::from_f64_lossy(weights.w_dice);
        let t = dice_terms(p, gt, k, hw);
        let eps = T::from_f64_lossy(weights.dice_smooth);
        let two = T::from_f64_lossy(2.0);
        let kk = T::from_usize(k).expect("classes");
        for c in 0..k {
            let den = t.pred_mass[c] + t.gt_mass[c] + eps;
            let num = two * t.intersection[c] + eps;
            // ∂D_c/∂p = (2 g den - num) / den²
            let base = -num / (den * den);
            let hit = two / den;
            for i in 0..hw {
                let g = if gt.data()[i] as usize == c { hit } else { T::zero() };
                dp[c * hw + i] -= w * (g + base) / kk;
            }
        }
    }
    let loss = seg_loss(&probs, gt, weights)?;
    let dprobs = Tensor::from_vec(probs.probs.shape(), dp)?;
    let dz = softmax_backward(&probs.probs, &dprobs);
    Ok((loss, probs, dz))
}

/// Curriculum weight `(1 - current / total)^2` (0-based epochs).
pub fn curriculum_factor(epoch_current: usize, epoch_total: usize) -> Result<f64> {
    if epoch_total == 0 {
        return Err(Error::Argument("epoch_total must be at least 1".into()));
    }
    if epoch_current > epoch_total {
        return Err(Error::Argument(format!(
            "epoch {epoch_current} exceeds total {epoch_total}"
        )));
    }
    let remaining = 1.0 - epoch_current as f64 / epoch_total as f64;
    Ok(remaining * remaining)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub epoch_current: usize,
    pub epoch_total: usize,
}

impl CurriculumState {
    pub fn new(epoch_current: usize, epoch_total: usize) -> Result<Self> {
        curriculum_factor(epoch_current, epoch_total)?;
        Ok(CurriculumState {
            epoch_current,
            epoch_total,
        })
    }

    pub fn f_epoch(&self) -> f64 {
        curriculum_factor(self.epoch_current, self.epoch_total).expect("validated on construction")
    }
}

/// `f · L_seg + (1 - f) · L_RL`.
///
/// The result is clamped to the closed interval spanned by the two losses,
/// which the exact value always lies in.
pub fn total_loss(l_seg: f64, l_rl: f64, f_epoch: f64) -> f64 {
    let v = f_epoch * l_seg + (1.0 - f_epoch) * l_rl;
    v.clamp(l_seg.min(l_rl), l_seg.max(l_rl))
}
