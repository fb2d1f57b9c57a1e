//! The trainable network: fuse projection, decoder, residual head and
//! policy, on top of features from the frozen encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{softmax_pixelwise, Decoder, DecoderConfig, LogitMap, ProbMap};
use crate::encoder::{global_pool, Encoder, EncoderConfig, FeatureMap, Fuse};
use crate::error::{Error, Result};
use crate::losses::{seg_loss_with_grad, LossWeights};
use crate::mask::Mask;
use crate::nn::ops::argmax_channels;
use crate::nn::{prefixed, Module};
use crate::rl::{dice_gain, refine, ActionMode, ActionSpace, Policy, PolicyOutput, Residual};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything that determines parameter shapes and frozen weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub side: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub actions: ActionSpace,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.actions.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let grid = self.encoder.grid_for(self.side)?;
        crate::decoder::stage_count(grid, self.side)?;
        Ok(())
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Frozen-encoder outputs for one image. They never change during
/// training, so the trainer computes them once per sample.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub taps: Vec<FeatureMap<T>>,
    pub taps_chw: Vec<Tensor<T>>,
    /// Mean-pooled final tap, the policy state.
    pub pooled: Vec<T>,
}

impl<T: Scalar> Encoded<T> {
    pub fn new(encoder: &Encoder<T>, image: &Tensor<f32>) -> Result<Self> {
        let taps = encoder.encode(image)?;
        let pooled = global_pool(taps.last().expect("at least one tap"));
        let taps_chw = taps.iter().map(FeatureMap::to_chw).collect();
        Ok(Encoded { taps, taps_chw, pooled })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// Decoder logits `z`.
    pub unrefined: LogitMap<T>,
    /// `O = z + α r`, equal to `z` when refinement is off.
    pub refined: LogitMap<T>,
    pub policy: Option<PolicyOutput<T>>,
}

impl<T: Scalar> Prediction<T> {
    pub fn labels(&self) -> Vec<u32> {
        argmax_channels(&self.refined.scores)
    }

    pub fn probs(&self) -> Result<ProbMap<T>> {
        softmax_pixelwise(&self.refined)
    }
}

/// Per-sample result of a training forward/backward pass.
#[derive(Clone, Debug)]
pub struct SampleStep<T> {
    pub seg_loss: f64,
    pub policy: Option<PolicyOutput<T>>,
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    pub fuse: Fuse<T>,
    pub decoder: Decoder<T>,
    pub residual: Residual<T>,
    pub policy: Policy<T>,
    pub actions: ActionSpace,
}

impl<T: Scalar> SegModel<T> {
    pub fn new<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let d = spec.encoder.embed_dim;
        let taps = spec.encoder.taps().len();
        let grid = spec.encoder.grid_for(spec.side)?;
        let fuse = Fuse::new(taps, d, spec.decoder.fused_channels, rng);
        let decoder = Decoder::new(&spec.decoder, grid, spec.side, spec.num_classes, taps, d, rng)?;
        let residual = Residual::new(spec.num_classes, rng);
        let policy = Policy::new(d, spec.actions.len(), rng);
        Ok(SegModel {
            fuse,
            decoder,
            residual,
            policy,
            actions: spec.actions.clone(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        SegModel {
            fuse: self.fuse.zeros_like(),
            decoder: self.decoder.zeros_like(),
            residual: self.residual.zeros_like(),
            policy: self.policy.zeros_like(),
            actions: self.actions.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes()
    }

    /// Decoder logits `z` for cached encoder features.
    pub fn logits(&self, enc: &Encoded<T>) -> Result<LogitMap<T>> {
        let (fused, _) = self.fuse.forward(&enc.taps)?;
        let skips = self.decoder.prepare_skips(&enc.taps_chw)?;
        Ok(self.decoder.forward(&fused, &skips)?.0)
    }

    /// Inference. With `use_rl` the policy picks `α` greedily.
    pub fn predict(&self, enc: &Encoded<T>, use_rl: bool) -> Result<Prediction<T>> {
        let z = self.logits(enc)?;
        if !use_rl {
            return Ok(Prediction {
                refined: z.clone(),
                unrefined: z,
                policy: None,
            });
        }
        let out = self.policy.greedy(enc.pooled.clone(), &self.actions)?;
        let (r, _) = self.residual.forward(&z)?;
        let refined = refine(&z, out.alpha, &r)?;
        Ok(Prediction {
            unrefined: z,
            refined,
            policy: Some(out),
        })
    }

    /// Forward and backward of the segmentation path for one sample.
    ///
    /// `seg_scale · dL_seg` is accumulated into `grad`. With `use_rl` an
    /// action is sampled and the loss is taken on the refined logits; the
    /// policy gradient is left to the caller because it needs the batch
    /// baseline.
    pub fn seg_step<R: Rng>(
        &self,
        enc: &Encoded<T>,
        gt: &Mask,
        use_rl: bool,
        seg_scale: T,
        weights: &LossWeights,
        rng: &mut R,
        grad: &mut SegModel<T>,
    ) -> Result<SampleStep<T>> {
        let (fused, fuse_cache) = self.fuse.forward(&enc.taps)?;
        let skips = self.decoder.prepare_skips(&enc.taps_chw)?;
        let (z, dec_cache) = self.decoder.forward(&fused, &skips)?;

        let mut rl = None;
        let refined = if use_rl {
            let out = self.policy.act(enc.pooled.clone(), &self.actions, ActionMode::Sample, rng)?;
            let (r, res_cache) = self.residual.forward(&z)?;
            let o = refine(&z, out.alpha, &r)?;
            rl = Some((out, res_cache));
            o
        } else {
            z.clone()
        };

        let (loss, _, mut d_out) = seg_loss_with_grad(&refined, gt, weights)?;
        d_out.scale(seg_scale);

        let mut reward = None;
        let mut dz = d_out.clone();
        if let Some((out, res_cache)) = &rl {
            let k = self.num_classes();
            reward = Some(dice_gain(
                &argmax_channels(&refined.scores),
                &argmax_channels(&z.scores),
                gt,
                k,
            ));
            if out.alpha != 0.0 {
                // dO/dr = α
                let mut dr = d_out;
                dr.scale(T::from_f64_lossy(out.alpha));
                let through = self.residual.backward(res_cache, &dr, &mut grad.residual);
                dz.add_assign(&through);
            }
        }
        let d_fused = self.decoder.backward(&dec_cache, &dz, &mut grad.decoder);
        self.fuse.backward(&fuse_cache, &d_fused, &mut grad.fuse);

        Ok(SampleStep {
            seg_loss: loss.to_f64_lossy(),
            policy: rl.map(|(out, _)| out),
            reward,
        })
    }
}

impl<T: Scalar> Module<T> for SegModel<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("fuse", self.fuse.params());
        out.extend(prefixed("decoder", self.decoder.params()));
        out.extend(prefixed("residual", self.residual.params()));
        out.extend(prefixed("policy", self.policy.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.fuse.params_mut();
        out.extend(self.decoder.params_mut());
        out.extend(self.residual.params_mut());
        out.extend(self.policy.params_mut());
        out
    }
}
