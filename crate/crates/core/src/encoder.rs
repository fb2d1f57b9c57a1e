//! Frozen patch-token feature extractor and the trainable fusion step.
//!
//! The surrogate backbone is a small transformer: a fixed orthonormal
//! patch projection, a prepended CLS token, 2-D sinusoidal positions and
//! `num_layers` pre-norm blocks (single-head attention + MLP) with seeded
//! weights. Weights never change after construction; they can also be
//! read from a [`crate::tensorfile`] container.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvCache, Module};
use crate::rng::{stream_rng, streams};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;
use crate::tensorfile;

const RESIDUAL_SCALE: f64 = 0.5;
const POSITION_SCALE: f64 = 0.5;
const MLP_RATIO: usize = 2;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    /// Layers whose outputs feed fusion and skips; empty means all layers.
    pub tap_layers: Vec<usize>,
    /// Seed of the surrogate weights (ignored when `weights_file` is set).
    pub seed: u64,
    pub weights_file: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            tap_layers: Vec::new(),
            seed: 0,
            weights_file: None,
        }
    }
}

impl EncoderConfig {
    pub fn taps(&self) -> Vec<usize> {
        if self.tap_layers.is_empty() {
            (0..self.num_layers).collect()
        } else {
            self.tap_layers.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "patch_size, embed_dim and num_layers must be positive".into(),
            ));
        }
        let taps = self.taps();
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("tap_layers {taps:?} must be strictly increasing")));
        }
        if let Some(&last) = taps.last() {
            if last >= self.num_layers {
                return Err(Error::Config(format!(
                    "tap layer {last} out of range for {} layers",
                    self.num_layers
                )));
            }
        }
        Ok(())
    }

    pub fn grid_for(&self, side: usize) -> Result<usize> {
        if !side.is_multiple_of(self.patch_size) {
            return Err(Error::Shape(format!(
                "image side {side} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(side / self.patch_size)
    }
}

/// A `G×G×D` grid of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub grid: Tensor<T>,
    /// Encoder layer that produced the grid, if any.
    pub depth: Option<usize>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn to_chw(&self) -> Tensor<T> {
        self.grid.hwc_to_chw()
    }
}

/// Removes the leading CLS token from a `(1 + G²) × D` sequence and lays the
/// rest out row-major on a `G×G` grid.
pub fn drop_cls_and_reshape<T: Scalar>(tokens: &Tensor<T>) -> Result<FeatureMap<T>> {
    if tokens.shape().len() != 2 {
        return Err(Error::Shape(format!("expected a token matrix, got {:?}", tokens.shape())));
    }
    let (len, dim) = (tokens.shape()[0], tokens.shape()[1]);
    let patches = len.saturating_sub(1);
    let g = (patches as f64).sqrt().round() as usize;
    if len < 2 || g * g != patches {
        return Err(Error::Shape(format!(
            "token count {len} is not 1 + a positive perfect square"
        )));
    }
    let grid = Tensor::from_vec(&[g, g, dim], tokens.data()[dim..].to_vec())?;
    Ok(FeatureMap { grid, depth: None })
}

/// Mean over all grid positions, per channel.
pub fn global_pool<T: Scalar>(feature: &FeatureMap<T>) -> Vec<T> {
    let (h, w, d) = feature.grid.dims3();
    let n = h * w;
    let mut acc = vec![T::zero(); d];
    for cell in feature.grid.data().chunks(d) {
        for (a, &v) in acc.iter_mut().zip(cell) {
            *a += v;
        }
    }
    let inv = T::one() / T::from_usize(n.max(1)).expect("count");
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

#[derive(Clone, Debug)]
struct Block<T> {
    norm1_w: Tensor<T>,
    norm1_b: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    proj: Tensor<T>,
    norm2_w: Tensor<T>,
    norm2_b: Tensor<T>,
    fc1_w: Tensor<T>,
    fc1_b: Tensor<T>,
    fc2_w: Tensor<T>,
    fc2_b: Tensor<T>,
}

const BLOCK_TENSORS: [&str; 12] = [
    "norm1.weight",
    "norm1.bias",
    "attn.q.weight",
    "attn.k.weight",
    "attn.v.weight",
    "attn.proj.weight",
    "norm2.weight",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl<T: Scalar> Block<T> {
    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.norm1_w,
            &self.norm1_b,
            &self.q,
            &self.k,
            &self.v,
            &self.proj,
            &self.norm2_w,
            &self.norm2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    fn shapes(d: usize) -> [Vec<usize>; 12] {
        let h = MLP_RATIO * d;
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![h, d],
            vec![h],
            vec![d, h],
            vec![d],
        ]
    }

    fn from_tensors(mut t: Vec<Tensor<T>>) -> Self {
        let mut next = || t.remove(0);
        Block {
            norm1_w: next(),
            norm1_b: next(),
            q: next(),
            k: next(),
            v: next(),
            proj: next(),
            norm2_w: next(),
            norm2_b: next(),
            fc1_w: next(),
            fc1_b: next(),
            fc2_w: next(),
            fc2_b: next(),
        }
    }

    fn seeded<R: Rng>(d: usize, rng: &mut R) -> Self {
        let tensors = Self::shapes(d)
            .iter()
            .zip(BLOCK_TENSORS)
            .map(|(shape, name)| {
                if name.starts_with("norm") {
                    let fill = if name.ends_with("weight") { T::one() } else { T::zero() };
                    Tensor::full(shape, fill)
                } else if name.ends_with("bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = shape[1] as f64;
                    let bound = (3.0 / fan_in).sqrt();
                    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                }
            })
            .collect();
        Self::from_tensors(tensors)
    }

    fn forward(&self, x: &mut Tensor<T>) {
        let n = x.shape()[0];
        let d = x.shape()[1];
        let h = self.fc1_b.len();
        let res = T::from_f64_lossy(RESIDUAL_SCALE);

        let normed = layer_norm(x, &self.norm1_w, &self.norm1_b);
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        gemm(n, d, d, normed.data(), false, self.q.data(), true, &mut q, false);
        gemm(n, d, d, normed.data(), false, self.k.data(), true, &mut k, false);
        gemm(n, d, d, normed.data(), false, self.v.data(), true, &mut v, false);
        let mut scores = vec![T::zero(); n * n];
        gemm(n, d, n, &q, false, &k, true, &mut scores, false);
        let inv_sqrt = T::one() / T::from_usize(d).expect("dim").sqrt();
        for row in scores.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s * inv_sqrt));
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s * inv_sqrt - max).exp();
                sum += *s;
            }
            row.iter_mut().for_each(|s| *s /= sum);
        }
        let mut att = vec![T::zero(); n * d];
        gemm(n, n, d, &scores, false, &v, false, &mut att, false);
        let mut out = vec![T::zero(); n * d];
        gemm(n, d, d, &att, false, self.proj.data(), true, &mut out, false);
        for (xv, o) in x.data_mut().iter_mut().zip(out) {
            *xv += res * o;
        }

        let normed = layer_norm(x, &self.norm2_w, &self.norm2_b);
        let mut hidden = vec![T::zero(); n * h];
        gemm(n, d, h, normed.data(), false, self.fc1_w.data(), true, &mut hidden, false);
        for row in hidden.chunks_mut(h) {
            for (v, &b) in row.iter_mut().zip(self.fc1_b.data()) {
                *v = gelu(*v + b);
            }
        }
        let mut mlp = vec![T::zero(); n * d];
        gemm(n, h, d, &hidden, false, self.fc2_w.data(), true, &mut mlp, false);
        for (row_x, row_m) in x.data_mut().chunks_mut(d).zip(mlp.chunks(d)) {
            for ((xv, &m), &b) in row_x.iter_mut().zip(row_m).zip(self.fc2_b.data()) {
                *xv += res * (m + b);
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64_lossy(0.5);
    let a = T::from_f64_lossy(0.044715);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let d = x.shape()[1];
    let eps = T::from_f64_lossy(LN_EPS);
    let dn = T::from_usize(d).expect("dim");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// Rows of a `rows × cols` matrix made orthonormal (or columns, when there
/// are more rows than columns) by modified Gram–Schmidt.
fn orthonormal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (n, len, transpose) = if rows <= cols { (rows, cols, false) } else { (cols, rows, true) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if transpose {
                out[j * cols + i] = x;
            } else {
                out[i * cols + j] = x;
            }
        }
    }
    out
}

/// Frozen surrogate vision backbone.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    config: EncoderConfig,
    patch_w: Tensor<T>,
    patch_b: Tensor<T>,
    cls: Tensor<T>,
    blocks: Vec<Block<T>>,
}

impl<T: Scalar> Encoder<T> {
    /// Builds the encoder from `config.weights_file` when set, otherwise
    /// from the seeded surrogate.
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        match &config.weights_file {
            Some(path) => Self::from_file(config, &tensorfile::load(path)?),
            None => Ok(Self::seeded(config)),
        }
    }

    fn seeded(config: &EncoderConfig) -> Self {
        let d = config.embed_dim;
        let p = config.patch_size * config.patch_size * 3;
        let mut rng = stream_rng(config.seed, streams::ENCODER);
        let w = orthonormal(d, p, &mut rng);
        // centre pixel values around 0.5 before projecting
        let b: Vec<f64> = w.chunks(p).map(|row| -0.5 * row.iter().sum::<f64>()).collect();
        let cls = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect::<Vec<f64>>();
        let blocks = (0..config.num_layers).map(|_| Block::seeded(d, &mut rng)).collect();
        let to_t = |v: Vec<f64>, shape: &[usize]| {
            Tensor::from_vec(shape, v.into_iter().map(T::from_f64_lossy).collect()).expect("shape")
        };
        Encoder {
            config: config.clone(),
            patch_w: to_t(w, &[d, p]),
            patch_b: to_t(b, &[d]),
            cls: to_t(cls, &[d]),
            blocks,
        }
    }

    fn from_file(config: &EncoderConfig, file: &tensorfile::TensorFile) -> Result<Self> {
        let d = config.embed_dim;
        let p = config.patch_size * config.patch_size * 3;
        let patch_w = file.expect("patch_embed.weight", &[d, p])?.cast();
        let patch_b = file.expect("patch_embed.bias", &[d])?.cast();
        let cls = file.expect("cls_token", &[d])?.cast();
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let tensors = BLOCK_TENSORS
                .iter()
                .zip(Block::<T>::shapes(d))
                .map(|(name, shape)| Ok(file.expect(&format!("blocks.{l}.{name}"), &shape)?.cast()))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(Block::from_tensors(tensors));
        }
        Ok(Encoder {
            config: config.clone(),
            patch_w,
            patch_b,
            cls,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// All frozen tensors with their container names.
    pub fn weights(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_w),
            ("patch_embed.bias".to_string(), &self.patch_b),
            ("cls_token".to_string(), &self.cls),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(block.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out
    }

    /// Writes the weights as a tensor container loadable via `weights_file`.
    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        let owned: Vec<(String, Tensor<f32>)> =
            self.weights().into_iter().map(|(n, t)| (n, t.cast())).collect();
        let refs: Vec<(String, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        let meta = serde_json::json!({
            "patch_size": self.config.patch_size,
            "embed_dim": self.config.embed_dim,
            "num_layers": self.config.num_layers,
        });
        tensorfile::save(path, meta, &refs)
    }

    /// SHA-256 over every weight's bytes, in container order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.weights() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn position_embedding(g: usize, d: usize) -> Vec<f64> {
        let quarter = (d / 4).max(1);
        let mut pe = vec![0.0; g * g * d];
        for r in 0..g {
            for c in 0..g {
                let cell = &mut pe[(r * g + c) * d..(r * g + c + 1) * d];
                for (i, v) in cell.iter_mut().enumerate() {
                    let band = (i / 4) % quarter;
                    let freq = 1.0 / 100f64.powf(band as f64 / quarter as f64);
                    let pos = if i % 4 < 2 { r } else { c } as f64;
                    *v = POSITION_SCALE * if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                }
            }
        }
        pe
    }

    /// Token sequence `(1 + G²) × D` after patch embedding (CLS first).
    fn embed(&self, image: &Tensor<f32>) -> Result<(Tensor<T>, usize)> {
        let (h, w, c) = image.dims3();
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
        }
        let ps = self.config.patch_size;
        if h % ps != 0 || w % ps != 0 || h != w {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not a square divisible by patch size {ps}"
            )));
        }
        let g = h / ps;
        let d = self.config.embed_dim;
        let p = ps * ps * 3;
        let src = image.data();
        let mut patches = vec![T::zero(); g * g * p];
        for py in 0..g {
            for px in 0..g {
                let dst = &mut patches[(py * g + px) * p..(py * g + px + 1) * p];
                for dy in 0..ps {
                    let row = ((py * ps + dy) * w + px * ps) * 3;
                    for (o, &v) in dst[dy * ps * 3..(dy + 1) * ps * 3]
                        .iter_mut()
                        .zip(&src[row..row + ps * 3])
                    {
                        *o = T::from_f64_lossy(v as f64);
                    }
                }
            }
        }
        let n = g * g;
        let mut tokens = vec![T::zero(); (n + 1) * d];
        tokens[..d].copy_from_slice(self.cls.data());
        gemm(n, p, d, &patches, false, self.patch_w.data(), true, &mut tokens[d..], false);
        let pe = Self::position_embedding(g, d);
        for (i, row) in tokens[d..].chunks_mut(d).enumerate() {
            for (j, (v, &b)) in row.iter_mut().zip(self.patch_b.data()).enumerate() {
                *v += b + T::from_f64_lossy(pe[i * d + j]);
            }
        }
        Ok((Tensor::from_vec(&[n + 1, d], tokens)?, g))
    }

    /// One feature grid per tap layer, shallowest first.
    pub fn encode(&self, image: &Tensor<f32>) -> Result<Vec<FeatureMap<T>>> {
        let (mut tokens, _) = self.embed(image)?;
        let taps = self.config.taps();
        let mut out = Vec::with_capacity(taps.len());
        for (l, block) in self.blocks.iter().enumerate() {
            block.forward(&mut tokens);
            if taps.contains(&l) {
                let mut fm = drop_cls_and_reshape(&tokens)?;
                fm.depth = Some(l);
                out.push(fm);
            }
        }
        Ok(out)
    }
}

/// Trainable multi-depth fusion: channel concatenation of the tap grids
/// followed by a 1×1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Fuse<T> {
    pub proj: Conv2d<T>,
}

pub struct FuseCache<T> {
    conv: ConvCache<T>,
}

impl<T: Scalar> Fuse<T> {
    pub fn new<R: Rng>(num_taps: usize, embed_dim: usize, out_channels: usize, rng: &mut R) -> Self {
        Fuse {
            proj: Conv2d::new(num_taps * embed_dim, out_channels, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Fuse {
            proj: self.proj.zeros_like(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.proj.out_channels()
    }

    fn stack(&self, features: &[FeatureMap<T>]) -> Result<Tensor<T>> {
        let first = features
            .first()
            .ok_or_else(|| Error::Shape("fuse needs at least one feature map".into()))?;
        let g = first.side();
        let mut data = Vec::new();
        let mut channels = 0;
        for f in features {
            if f.grid.shape()[..2] != [g, g] {
                return Err(Error::Shape(format!(
                    "feature grids disagree: {:?} vs {g}x{g}",
                    &f.grid.shape()[..2]
                )));
            }
            data.extend_from_slice(f.to_chw().data());
            channels += f.channels();
        }
        if channels != self.proj.in_channels() {
            return Err(Error::Shape(format!(
                "fuse expects {} stacked channels, got {channels}",
                self.proj.in_channels()
            )));
        }
        Tensor::from_vec(&[channels, g, g], data)
    }

    /// Fused grid in `C×G×G` layout for the decoder.
    pub fn forward(&self, features: &[FeatureMap<T>]) -> Result<(Tensor<T>, FuseCache<T>)> {
        let stacked = self.stack(features)?;
        let (y, conv) = self.proj.forward(&stacked)?;
        Ok((y, FuseCache { conv }))
    }

    pub fn backward(&self, cache: &FuseCache<T>, dy: &Tensor<T>, grad: &mut Fuse<T>) {
        self.proj.backward(&cache.conv, dy, &mut grad.proj);
    }

    /// Fused grid as a `G×G×D_dec` feature map.
    pub fn fuse(&self, features: &[FeatureMap<T>]) -> Result<FeatureMap<T>> {
        let (y, _) = self.forward(features)?;
        Ok(FeatureMap {
            grid: y.chw_to_hwc(),
            depth: None,
        })
    }
}

impl<T: Scalar> Module<T> for Fuse<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        crate::nn::prefixed("proj", self.proj.params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.proj.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, DatasetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(side: usize) -> Tensor<f32> {
        let cfg = DatasetConfig {
            height: side,
            width: side,
            num_samples: 1,
            ..DatasetConfig::default()
        };
        generate_scene(&cfg, 0).unwrap().image
    }

    #[test]
    fn desk_input_gives_8x8_grids() {
        let enc = Encoder::<f32>::new(&EncoderConfig::default()).unwrap();
        let feats = enc.encode(&image(64)).unwrap();
        assert_eq!(feats.len(), 4);
        for (l, f) in feats.iter().enumerate() {
            assert_eq!(f.grid.shape(), &[8, 8, 64]);
            assert_eq!(f.depth, Some(l));
            assert!(f.grid.all_finite());
        }
    }

    #[test]
    fn patch16_on_224_gives_14x14() {
        let cfg = EncoderConfig {
            patch_size: 16,
            embed_dim: 16,
            num_layers: 1,
            ..EncoderConfig::default()
        };
        let enc = Encoder::<f32>::new(&cfg).unwrap();
        let img = Tensor::full(&[224, 224, 3], 0.3f32);
        assert_eq!(enc.encode(&img).unwrap()[0].grid.shape(), &[14, 14, 16]);
    }

    #[test]
    fn encoding_is_pure() {
        let enc = Encoder::<f32>::new(&EncoderConfig::default()).unwrap();
        let img = image(64);
        assert_eq!(enc.encode(&img).unwrap(), enc.encode(&img).unwrap());
    }

    #[test]
    fn indivisible_size_names_both_dimensions() {
        let enc = Encoder::<f32>::new(&EncoderConfig::default()).unwrap();
        let err = enc.encode(&Tensor::zeros(&[60, 60, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Shape(_)));
        assert!(msg.contains("60") && msg.contains('8'), "{msg}");
    }

    #[test]
    fn bad_tap_layers_are_rejected() {
        for taps in [vec![1, 1], vec![2, 1], vec![4]] {
            let cfg = EncoderConfig {
                tap_layers: taps,
                ..EncoderConfig::default()
            };
            assert!(matches!(Encoder::<f32>::new(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn weight_file_round_trip_reproduces_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let cfg = EncoderConfig {
            num_layers: 2,
            ..EncoderConfig::default()
        };
        let enc = Encoder::<f32>::new(&cfg).unwrap();
        enc.save_weights(&path).unwrap();
        let loaded = Encoder::<f32>::new(&EncoderConfig {
            weights_file: Some(path.clone()),
            seed: 999,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(enc.checksum(), loaded.checksum());
        let img = image(64);
        assert_eq!(enc.encode(&img).unwrap(), loaded.encode(&img).unwrap());
        // shape mismatch against the configured width is reported
        let wrong = EncoderConfig {
            embed_dim: 32,
            weights_file: Some(path),
            ..cfg
        };
        assert!(Encoder::<f32>::new(&wrong).is_err());
    }

    #[test]
    fn cls_drop_reshapes_row_major() {
        let d = 4;
        let tokens = Tensor::<f64>::from_fn(&[65, d], |i| i as f64);
        let fm = drop_cls_and_reshape(&tokens).unwrap();
        assert_eq!(fm.grid.shape(), &[8, 8, 4]);
        for i in 1..65usize {
            let (r, c) = ((i - 1) / 8, (i - 1) % 8);
            for ch in 0..d {
                assert_eq!(fm.grid.data()[(r * 8 + c) * d + ch], (i * d + ch) as f64);
            }
        }
    }

    #[test]
    fn cls_drop_accepts_exactly_one_plus_squares() {
        for len in 0..40usize {
            let tokens = Tensor::<f32>::zeros(&[len, 2]);
            let ok = len >= 2 && {
                let n = len - 1;
                (1..=n).any(|g| g * g == n)
            };
            assert_eq!(drop_cls_and_reshape(&tokens).is_ok(), ok, "len {len}");
        }
        assert!(drop_cls_and_reshape(&Tensor::<f32>::zeros(&[11, 2])).is_err());
    }

    #[test]
    fn pooling_examples() {
        let c = FeatureMap {
            grid: Tensor::<f64>::full(&[3, 3, 5], 0.7),
            depth: None,
        };
        assert!(global_pool(&c).iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let g = FeatureMap {
            grid: Tensor::<f64>::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            depth: None,
        };
        assert_eq!(global_pool(&g), vec![2.5]);
        let swapped = FeatureMap {
            grid: Tensor::<f64>::from_vec(&[2, 2, 1], vec![4.0, 1.0, 3.0, 2.0]).unwrap(),
            depth: None,
        };
        assert_eq!(global_pool(&swapped), global_pool(&g));
    }

    fn identity_proj(d_in: usize, d_out: usize, scale: f64, blocks: usize) -> Conv2d<f64> {
        let mut w = Tensor::zeros(&[d_out, d_in * blocks, 1, 1]);
        for b in 0..blocks {
            for i in 0..d_out {
                w.data_mut()[i * d_in * blocks + b * d_in + i] = scale;
            }
        }
        Conv2d {
            weight: w,
            bias: Tensor::zeros(&[d_out]),
        }
    }

    #[test]
    fn fuse_identity_and_averaging_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tap = FeatureMap {
            grid: Tensor::<f64>::from_fn(&[4, 4, 3], |_| rng.random_range(-1.0..1.0)),
            depth: Some(0),
        };
        let single = Fuse { proj: identity_proj(3, 3, 1.0, 1) };
        assert_eq!(single.fuse(std::slice::from_ref(&tap)).unwrap().grid, tap.grid);

        let pair = Fuse { proj: identity_proj(3, 3, 0.5, 2) };
        let out = pair.fuse(&[tap.clone(), tap.clone()]).unwrap();
        for (a, b) in out.grid.data().iter().zip(tap.grid.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_output_width_is_independent_of_tap_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for taps in 1..4 {
            let fuse = Fuse::<f32>::new(taps, 8, 5, &mut rng);
            let feats: Vec<_> = (0..taps)
                .map(|_| FeatureMap {
                    grid: Tensor::full(&[8, 8, 8], 0.1f32),
                    depth: None,
                })
                .collect();
            assert_eq!(fuse.fuse(&feats).unwrap().grid.shape(), &[8, 8, 5]);
        }
    }

    #[test]
    fn fuse_rejects_mismatched_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fuse = Fuse::<f32>::new(2, 2, 2, &mut rng);
        let a = FeatureMap { grid: Tensor::zeros(&[4, 4, 2]), depth: None };
        let b = FeatureMap { grid: Tensor::zeros(&[8, 8, 2]), depth: None };
        assert!(matches!(fuse.fuse(&[a, b]), Err(Error::Shape(_))));
    }
}
