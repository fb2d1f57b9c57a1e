//! Multi-stage ×2 upsampling decoder and pixelwise softmax.
//!
//! Each stage is a kernel-2 / stride-2 transposed convolution, an optional
//! skip merge (channel concatenation of an encoder grid resized to the
//! stage resolution) and two 3×3 convolutions with ReLU. A 1×1 head maps
//! the last stage to class logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::ops::{concat_channels, relu_backward, relu_inplace, resize_bilinear, take_channels};
use crate::nn::{prefixed, Conv2d, ConvCache, ConvTranspose2x2, ConvTransposeCache, Module};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Width of the fused grid entering the decoder.
    pub fused_channels: usize,
    /// Channels halve each stage down to this floor.
    pub min_channels: usize,
    /// Merge encoder grids into the stages.
    pub skips: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            fused_channels: 64,
            min_channels: 16,
            skips: true,
        }
    }
}

impl DecoderConfig {
    pub fn stage_channels(&self, stages: usize) -> Vec<usize> {
        (0..stages)
            .map(|s| (self.fused_channels >> (s + 1)).max(self.min_channels))
            .collect()
    }
}

/// Number of doubling stages taking a `grid` to `side`.
pub fn stage_count(grid: usize, side: usize) -> Result<usize> {
    if grid == 0 || !side.is_multiple_of(grid) || !(side / grid).is_power_of_two() {
        return Err(Error::Config(format!(
            "grid {grid} cannot be doubled to image side {side}"
        )));
    }
    Ok((side / grid).trailing_zeros() as usize)
}

/// Pre-softmax class scores, `K×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap<T> {
    pub scores: Tensor<T>,
}

/// Per-pixel class probabilities, `K×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> LogitMap<T> {
    pub fn num_classes(&self) -> usize {
        self.scores.shape()[0]
    }
}

impl<T: Scalar> ProbMap<T> {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn argmax(&self) -> Vec<u32> {
        crate::nn::ops::argmax_channels(&self.probs)
    }
}

/// Max-subtracted softmax over the class axis at every pixel.
pub fn softmax_pixelwise<T: Scalar>(logits: &LogitMap<T>) -> Result<ProbMap<T>> {
    let (k, h, w) = logits.scores.dims3();
    let hw = h * w;
    let z = logits.scores.data();
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in logits".into()));
    }
    let mut p = vec![T::zero(); z.len()];
    for px in 0..hw {
        let mut max = T::neg_infinity();
        for c in 0..k {
            max = max.max(z[c * hw + px]);
        }
        let mut sum = T::zero();
        for c in 0..k {
            let e = (z[c * hw + px] - max).exp();
            p[c * hw + px] = e;
            sum += e;
        }
        for c in 0..k {
            p[c * hw + px] /= sum;
        }
    }
    Ok(ProbMap {
        probs: Tensor::from_vec(&[k, h, w], p)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub up: ConvTranspose2x2<T>,
    pub refine1: Conv2d<T>,
    pub refine2: Conv2d<T>,
    pub skip_channels: usize,
}

pub struct StageCache<T> {
    up: ConvTransposeCache<T>,
    up_channels: usize,
    refine1: ConvCache<T>,
    out1: Tensor<T>,
    refine2: ConvCache<T>,
    out2: Tensor<T>,
}

impl<T: Scalar> Stage<T> {
    fn zeros_like(&self) -> Self {
        Stage {
            up: self.up.zeros_like(),
            refine1: self.refine1.zeros_like(),
            refine2: self.refine2.zeros_like(),
            skip_channels: self.skip_channels,
        }
    }

    fn forward(&self, x: &Tensor<T>, skip: Option<&Tensor<T>>) -> Result<(Tensor<T>, StageCache<T>)> {
        let (up, up_cache) = self.up.forward(x)?;
        let up_channels = up.shape()[0];
        let merged = match skip {
            Some(s) if self.skip_channels > 0 => {
                if s.shape() != [self.skip_channels, up.shape()[1], up.shape()[2]] {
                    return Err(Error::Shape(format!(
                        "skip feature {:?} does not match stage input {:?}",
                        s.shape(),
                        up.shape()
                    )));
                }
                concat_channels(&up, s)
            }
            None if self.skip_channels > 0 => {
                return Err(Error::Shape("stage expects a skip feature".into()))
            }
            _ => up,
        };
        let (mut out1, refine1) = self.refine1.forward(&merged)?;
        relu_inplace(&mut out1);
        let (mut out2, refine2) = self.refine2.forward(&out1)?;
        relu_inplace(&mut out2);
        Ok((
            out2.clone(),
            StageCache {
                up: up_cache,
                up_channels,
                refine1,
                out1,
                refine2,
                out2,
            },
        ))
    }

    fn backward(&self, cache: &StageCache<T>, dy: &Tensor<T>, grad: &mut Stage<T>) -> Tensor<T> {
        let mut d2 = dy.clone();
        relu_backward(&mut d2, &cache.out2);
        let mut d1 = self.refine2.backward(&cache.refine2, &d2, &mut grad.refine2);
        relu_backward(&mut d1, &cache.out1);
        let dmerged = self.refine1.backward(&cache.refine1, &d1, &mut grad.refine1);
        let dup = if self.skip_channels > 0 {
            take_channels(&dmerged, cache.up_channels)
        } else {
            dmerged
        };
        self.up.backward(&cache.up, &dup, &mut grad.up)
    }
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("up", self.up.params());
        out.extend(prefixed("refine1", self.refine1.params()));
        out.extend(prefixed("refine2", self.refine2.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.up.params_mut();
        out.extend(self.refine1.params_mut());
        out.extend(self.refine2.params_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub stages: Vec<Stage<T>>,
    pub head: Conv2d<T>,
    grid: usize,
    side: usize,
    /// Tap index merged at each stage, if any.
    skip_taps: Vec<Option<usize>>,
}

pub struct DecoderCache<T> {
    stages: Vec<StageCache<T>>,
    head: ConvCache<T>,
}

impl<T: Scalar> Decoder<T> {
    /// Builds a decoder taking a `grid × grid` fused map to `side × side`
    /// logits over `num_classes`. `num_taps` encoder grids of width
    /// `skip_width` are available for skips. The head starts at zero.
    pub fn new<R: Rng>(
        config: &DecoderConfig,
        grid: usize,
        side: usize,
        num_classes: usize,
        num_taps: usize,
        skip_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = stage_count(grid, side)?;
        if config.fused_channels == 0 || config.min_channels == 0 {
            return Err(Error::Config("decoder channel counts must be positive".into()));
        }
        let channels = config.stage_channels(n);
        let mut stages = Vec::with_capacity(n);
        let mut skip_taps = Vec::with_capacity(n);
        let mut cin = config.fused_channels;
        for (s, &cout) in channels.iter().enumerate() {
            // finest stage takes the shallowest tap
            let tap = (config.skips && num_taps > 0).then(|| (n - 1 - s).min(num_taps - 1));
            let skip_channels = if tap.is_some() { skip_width } else { 0 };
            stages.push(Stage {
                up: ConvTranspose2x2::new(cin, cout, rng),
                refine1: Conv2d::new(cout + skip_channels, cout, 3, rng),
                refine2: Conv2d::new(cout, cout, 3, rng),
                skip_channels,
            });
            skip_taps.push(tap);
            cin = cout;
        }
        Ok(Decoder {
            stages,
            head: Conv2d::zeros(cin, num_classes, 1),
            grid,
            side,
            skip_taps,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_channels()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn zeros_like(&self) -> Self {
        Decoder {
            stages: self.stages.iter().map(Stage::zeros_like).collect(),
            head: self.head.zeros_like(),
            grid: self.grid,
            side: self.side,
            skip_taps: self.skip_taps.clone(),
        }
    }

    /// Skip tensors for every stage, resized from `C×G×G` tap grids.
    pub fn prepare_skips(&self, taps_chw: &[Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut res = self.grid;
        self.skip_taps
            .iter()
            .map(|tap| {
                res *= 2;
                match tap {
                    Some(i) => {
                        let t = taps_chw.get(*i).ok_or_else(|| {
                            Error::Shape(format!("skip tap {i} missing ({} provided)", taps_chw.len()))
                        })?;
                        Ok(Some(resize_bilinear(t, res, res)))
                    }
                    None => Ok(None),
                }
            })
            .collect()
    }

    /// One transposed-conv + refinement stage.
    pub fn upsample_stage(&self, input: &Tensor<T>, stage: usize, skip: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let st = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::Argument(format!("stage {stage} out of range")))?;
        Ok(st.forward(input, skip)?.0)
    }

    pub fn forward(&self, fused: &Tensor<T>, skips: &[Option<Tensor<T>>]) -> Result<(LogitMap<T>, DecoderCache<T>)> {
        let (_, g, g2) = fused.dims3();
        if g != self.grid || g2 != self.grid {
            return Err(Error::Shape(format!(
                "decoder built for a {0}x{0} grid, got {g}x{g2}",
                self.grid
            )));
        }
        let mut x = fused.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let (y, cache) = stage.forward(&x, skips.get(s).and_then(|o| o.as_ref()))?;
            caches.push(cache);
            x = y;
        }
        let (scores, head) = self.head.forward(&x)?;
        Ok((LogitMap { scores }, DecoderCache { stages: caches, head }))
    }

    /// Accumulates gradients and returns `dL/d(fused)`.
    pub fn backward(&self, cache: &DecoderCache<T>, dlogits: &Tensor<T>, grad: &mut Decoder<T>) -> Tensor<T> {
        let mut d = self.head.backward(&cache.head, dlogits, &mut grad.head);
        for s in (0..self.stages.len()).rev() {
            d = self.stages[s].backward(&cache.stages[s], &d, &mut grad.stages[s]);
        }
        d
    }

    /// Logits for a fused map and the encoder's tap grids.
    pub fn decode(&self, fused: &FeatureMap<T>, taps: &[FeatureMap<T>]) -> Result<LogitMap<T>> {
        let taps_chw: Vec<_> = taps.iter().map(FeatureMap::to_chw).collect();
        let skips = self.prepare_skips(&taps_chw)?;
        Ok(self.forward(&fused.to_chw(), &skips)?.0)
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.extend(prefixed(&format!("stage{i}"), s.params()));
        }
        out.extend(prefixed("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend(s.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}
