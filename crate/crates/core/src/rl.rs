//! Policy-gradient refinement of decoder logits.
//!
//! A small policy looks at the pooled fused feature map and picks a scalar
//! step `α` from a fixed action set. A residual head proposes a correction
//! `r(z)` to the logits and the refined output is `O = z + α · r(z)`. The
//! reward is the Dice gain of `O` over `z`.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{LogitMap, ProbMap};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{ops, prefixed, Conv2d, ConvCache, Linear, Module};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSpace {
    values: Vec<f64>,
}

impl Default for ActionSpace {
    fn default() -> Self {
        ActionSpace {
            values: vec![-0.1, 0.0, 0.1],
        }
    }
}

impl ActionSpace {
    /// Needs at least two finite, strictly increasing values including 0.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let space = ActionSpace { values };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.values;
        if v.len() < 2 {
            return Err(Error::Config("action space needs at least two actions".into()));
        }
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("action values must be finite".into()));
        }
        if v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("action values must be strictly increasing".into()));
        }
        if !v.contains(&0.0) {
            return Err(Error::Config("action space must contain 0 (no-op)".into()));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

}

/// Argmax with ties going to the lowest index.
pub fn greedy_index<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug)]
pub struct PolicyOutput<T> {
    pub state: Vec<T>,
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub action: usize,
    pub alpha: f64,
}

impl<T: Scalar> PolicyOutput<T> {
    pub fn log_prob(&self) -> f64 {
        self.probs[self.action].to_f64_lossy().max(1e-12).ln()
    }
}

/// Two-layer MLP over a pooled state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub const POLICY_HIDDEN: usize = 64;

fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<T: Scalar> Policy<T> {
    /// The output layer starts at zero so the initial policy is uniform.
    pub fn new<R: Rng>(state_dim: usize, num_actions: usize, rng: &mut R) -> Self {
        Policy {
            fc1: Linear::new(state_dim, POLICY_HIDDEN, rng),
            fc2: Linear::zeros(POLICY_HIDDEN, num_actions),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Policy {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.fc1.in_features()
    }

    /// Action probabilities with the greedy choice filled in.
    pub fn greedy(&self, state: Vec<T>, actions: &ActionSpace) -> Result<PolicyOutput<T>> {
        if state.len() != self.state_dim() {
            return Err(Error::Shape(format!(
                "policy expects a {}-dim state, got {}",
                self.state_dim(),
                state.len()
            )));
        }
        if actions.len() != self.fc2.out_features() {
            return Err(Error::Shape(format!(
                "policy has {} outputs but the action space has {}",
                self.fc2.out_features(),
                actions.len()
            )));
        }
        let mut hidden = self.fc1.forward(&state);
        for h in &mut hidden {
            *h = h.max(T::zero());
        }
        let logits = self.fc2.forward(&hidden);
        let probs = softmax(&logits);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("policy produced non-finite probabilities".into()));
        }
        let action = greedy_index(&probs);
        Ok(PolicyOutput {
            alpha: actions.value(action),
            state,
            hidden,
            logits,
            probs,
            action,
        })
    }

    pub fn act<R: Rng>(
        &self,
        state: Vec<T>,
        actions: &ActionSpace,
        mode: ActionMode,
        rng: &mut R,
    ) -> Result<PolicyOutput<T>> {
        let mut out = self.greedy(state, actions)?;
        if mode == ActionMode::Sample {
            let w: Vec<f64> = out.probs.iter().map(|p| p.to_f64_lossy()).collect();
            out.action = WeightedIndex::new(&w)
                .map_err(|e| Error::Numeric(format!("policy distribution: {e}")))?
                .sample(rng);
            out.alpha = actions.value(out.action);
        }
        Ok(out)
    }

    /// Accumulates `d/dθ [scale · (-log π(a|s))]` into `grad`.
    pub fn backward_neg_log_prob(&self, out: &PolicyOutput<T>, scale: T, grad: &mut Policy<T>) {
        // d(-log π_a)/dz = π - onehot(a)
        let dz: Vec<T> = out
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| scale * (p - if i == out.action { T::one() } else { T::zero() }))
            .collect();
        let mut dh = self.fc2.backward(&out.hidden, &dz, &mut grad.fc2);
        for (d, &h) in dh.iter_mut().zip(&out.hidden) {
            if h <= T::zero() {
                *d = T::zero();
            }
        }
        self.fc1.backward(&out.state, &dh, &mut grad.fc1);
    }
}

impl<T: Scalar> Module<T> for Policy<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("fc1", self.fc1.params());
        out.extend(prefixed("fc2", self.fc2.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.fc1.params_mut();
        out.extend(self.fc2.params_mut());
        out
    }
}

pub const RESIDUAL_HIDDEN: usize = 32;

/// Residual correction head `r(z)`: conv3, ReLU, conv3 (zero-initialised).
#[derive(Clone, Debug, PartialEq)]
pub struct Residual<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

pub struct ResidualCache<T> {
    c1: ConvCache<T>,
    h: Tensor<T>,
    c2: ConvCache<T>,
}

impl<T: Scalar> Residual<T> {
    pub fn new<R: Rng>(num_classes: usize, rng: &mut R) -> Self {
        Residual {
            conv1: Conv2d::new(num_classes, RESIDUAL_HIDDEN, 3, rng),
            conv2: Conv2d::zeros(RESIDUAL_HIDDEN, num_classes, 3),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Residual {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }

    /// Correction map `r(z)`, same shape as `z`.
    pub fn forward(&self, logits: &LogitMap<T>) -> Result<(LogitMap<T>, ResidualCache<T>)> {
        let (mut h, c1) = self.conv1.forward(&logits.scores)?;
        ops::relu_inplace(&mut h);
        let (r, c2) = self.conv2.forward(&h)?;
        Ok((LogitMap { scores: r }, ResidualCache { c1, h, c2 }))
    }

    /// Given `dL/dr`, accumulates head gradients and returns the part of
    /// `dL/dz` that flows through `r`.
    pub fn backward(&self, cache: &ResidualCache<T>, dr: &Tensor<T>, grad: &mut Residual<T>) -> Tensor<T> {
        let mut dh = self.conv2.backward(&cache.c2, dr, &mut grad.conv2);
        ops::relu_backward(&mut dh, &cache.h);
        self.conv1.backward(&cache.c1, &dh, &mut grad.conv1)
    }
}

/// `O = z + α · r`. With `α = 0` the result is `z` bit for bit.
pub fn refine<T: Scalar>(z: &LogitMap<T>, alpha: f64, r: &LogitMap<T>) -> Result<LogitMap<T>> {
    if z.scores.shape() != r.scores.shape() {
        return Err(Error::Shape(format!(
            "refine: logits {:?} vs residual {:?}",
            z.scores.shape(),
            r.scores.shape()
        )));
    }
    let mut out = z.scores.clone();
    if alpha != 0.0 {
        out.axpy(T::from_f64_lossy(alpha), &r.scores);
    }
    Ok(LogitMap { scores: out })
}

impl<T: Scalar> Module<T> for Residual<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("conv1", self.conv1.params());
        out.extend(prefixed("conv2", self.conv2.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        out
    }
}

/// Hard Dice averaged over classes present in the ground truth or the
/// prediction. Returns 1 when both are empty, which cannot happen for
/// non-empty masks.
pub fn hard_dice(pred: &[u32], gt: &Mask, num_classes: usize) -> f64 {
    assert_eq!(pred.len(), gt.len(), "prediction and mask sizes differ");
    let mut inter = vec![0u64; num_classes];
    let mut p = vec![0u64; num_classes];
    let mut g = vec![0u64; num_classes];
    for (&a, &b) in pred.iter().zip(gt.data()) {
        p[a as usize] += 1;
        g[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    let (sum, n) = (0..num_classes)
        .filter(|&c| p[c] + g[c] > 0)
        .map(|c| 2.0 * inter[c] as f64 / (p[c] + g[c]) as f64)
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// `Dice(argmax O) - Dice(argmax z)` on hard label maps.
pub fn dice_gain(refined: &[u32], unrefined: &[u32], gt: &Mask, num_classes: usize) -> f64 {
    hard_dice(refined, gt, num_classes) - hard_dice(unrefined, gt, num_classes)
}

/// Reward for one image. Only the argmax of each map matters, so it carries
/// no gradient.
pub fn compute_reward<T: Scalar>(refined: &ProbMap<T>, unrefined: &ProbMap<T>, gt: &Mask) -> f64 {
    let k = refined.num_classes();
    dice_gain(&refined.argmax(), &unrefined.argmax(), gt, k)
}

/// Exponential moving average of the mean batch reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub value: Option<f64>,
    pub momentum: f64,
}

impl BaselineState {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("baseline momentum {momentum} not in [0, 1)")));
        }
        Ok(BaselineState { value: None, momentum })
    }

    /// Baseline to use for the current step; the first batch seeds it.
    pub fn current(&self, batch_mean: f64) -> f64 {
        self.value.unwrap_or(batch_mean)
    }

    pub fn update(&mut self, batch_mean: f64) {
        self.value = Some(match self.value {
            None => batch_mean,
            Some(b) => self.momentum * b + (1.0 - self.momentum) * batch_mean,
        });
    }
}

/// `-(1/B) Σ (R_i - b) log π(a_i | s_i)`.
pub fn policy_loss(rewards: &[f64], log_probs: &[f64], baseline: f64) -> f64 {
    assert_eq!(rewards.len(), log_probs.len());
    if rewards.is_empty() {
        return 0.0;
    }
    let s: f64 = rewards
        .iter()
        .zip(log_probs)
        .map(|(r, lp)| -(r - baseline) * lp)
        .sum();
    s / rewards.len() as f64
}
