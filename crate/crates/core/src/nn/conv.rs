use rand::Rng;

use super::{he_uniform, Module};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Square-kernel, stride-1, zero-padded ("same") 2-D convolution on `C×H×W`.
///
/// The kernel size must be odd; a 1×1 kernel skips the im2col copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Conv2d {
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let (c, h, w) = x.dims3();
        let k = self.kernel();
        if k == 1 {
            return x.data().to_vec();
        }
        let pad = (k / 2) as isize;
        let hw = h * w;
        let src = x.data();
        let mut cols = vec![T::zero(); c * k * k * hw];
        for ci in 0..c {
            let plane = &src[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        let s0 = (x0 as isize + dx) as usize;
                        dst_row[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
        let k = self.kernel();
        if k == 1 {
            return Tensor::from_vec(&[c, h, w], cols.to_vec()).expect("col2im shape");
        }
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut out = vec![T::zero(); c * hw];
        for ci in 0..c {
            let plane = &mut out[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let s0 = (x0 as isize + dx) as usize;
                        let dst_row = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                        for (d, &s) in dst_row.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[c, h, w], out).expect("col2im shape")
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        if x.shape().len() != 3 || x.shape()[0] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got shape {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let (_, h, w) = x.dims3();
        let cols = self.im2col(x);
        let out_c = self.out_channels();
        let rows = self.weight.len() / out_c;
        let hw = h * w;
        let mut y = vec![T::zero(); out_c * hw];
        gemm(out_c, rows, hw, self.weight.data(), false, &cols, false, &mut y, false);
        for (o, chunk) in y.chunks_mut(hw).enumerate() {
            let b = self.bias.data()[o];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok((
            Tensor::from_vec(&[out_c, h, w], y)?,
            ConvCache {
                cols,
                height: h,
                width: w,
            },
        ))
    }

    pub fn backward(&self, cache: &ConvCache<T>, dy: &Tensor<T>, grad: &mut Conv2d<T>) -> Tensor<T> {
        let out_c = self.out_channels();
        let hw = cache.height * cache.width;
        assert_eq!(dy.shape(), &[out_c, cache.height, cache.width], "conv backward shape");
        let rows = self.weight.len() / out_c;
        gemm(out_c, hw, rows, dy.data(), false, &cache.cols, true, grad.weight.data_mut(), true);
        for (o, chunk) in dy.data().chunks(hw).enumerate() {
            grad.bias.data_mut()[o] += chunk.iter().copied().sum();
        }
        let mut dcols = vec![T::zero(); rows * hw];
        gemm(rows, out_c, hw, self.weight.data(), true, dy.data(), false, &mut dcols, false);
        self.col2im(&dcols, self.in_channels(), cache.height, cache.width)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the reference.
    fn naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = x.dims3();
        let k = conv.kernel();
        let pad = (k / 2) as isize;
        let o = conv.out_channels();
        Tensor::from_fn(&[o, h, w], |idx| {
            let oc = idx / (h * w);
            let y = (idx / w) % h;
            let xx = idx % w;
            let mut s = conv.bias.data()[oc];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = xx as isize + kx as isize - pad;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        s += conv.weight.data()[((oc * c + ci) * k + ky) * k + kx]
                            * x.data()[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
            s
        })
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, &mut rng);
            conv.bias = Tensor::from_fn(&[4], |i| i as f64 * 0.1);
            let x = Tensor::from_fn(&[3, 5, 6], |_| rng.random_range(-1.0..1.0));
            let (y, _) = conv.forward(&x).unwrap();
            let want = naive(&conv, &x);
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::<f64>::new(2, 3, 3, &mut rng);
        let x = Tensor::from_fn(&[2, 4, 5], |_| rng.random_range(-1.0..1.0));
        let probe = Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            let (y, _) = c.forward(x).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv.forward(&x).unwrap();
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&cache, &probe, &mut grad);
        let h = 1e-6;
        for i in [0, 7, 20, 53] {
            let mut p = conv.clone();
            p.weight.data_mut()[i] += h;
            let mut m = conv.clone();
            m.weight.data_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad.weight.data()[i]).abs() < 1e-7);
        }
        for i in [0, 11, 39] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7);
        }
        let bias_fd: f64 = probe.data()[..20].iter().sum();
        assert!((grad.bias.data()[0] - bias_fd).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let conv = Conv2d::<f32>::zeros(3, 2, 3);
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(conv.forward(&x), Err(Error::Shape(_))));
    }
}
