use rand::Rng;

use super::{he_uniform, Module};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Transposed convolution with kernel 2 and stride 2.
///
/// Each input cell writes a disjoint 2×2 output block, so the output is
/// exactly twice the input in both spatial dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2x2<T> {
    /// `[in, out, 2, 2]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvTransposeCache<T> {
    input: Tensor<T>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        ConvTranspose2x2 {
            weight: he_uniform(&[in_channels, out_channels, 2, 2], in_channels, rng),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        ConvTranspose2x2 {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvTransposeCache<T>)> {
        if x.shape().len() != 3 || x.shape()[0] != self.in_channels() {
            return Err(Error::Shape(format!(
                "transposed conv expects {} input channels, got shape {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let (cin, h, w) = x.dims3();
        let cout = self.out_channels();
        let hw = h * w;
        // blocks[(co*4 + a*2 + b), i*w + j]
        let mut blocks = vec![T::zero(); cout * 4 * hw];
        gemm(cout * 4, cin, hw, self.weight.data(), true, x.data(), false, &mut blocks, false);
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); cout * oh * ow];
        for co in 0..cout {
            let bias = self.bias.data()[co];
            for a in 0..2 {
                for b in 0..2 {
                    let src = &blocks[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..h {
                        let row = (co * oh + 2 * i + a) * ow;
                        for j in 0..w {
                            y[row + 2 * j + b] = src[i * w + j] + bias;
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(&[cout, oh, ow], y)?,
            ConvTransposeCache { input: x.clone() },
        ))
    }

    pub fn backward(
        &self,
        cache: &ConvTransposeCache<T>,
        dy: &Tensor<T>,
        grad: &mut ConvTranspose2x2<T>,
    ) -> Tensor<T> {
        let (cin, h, w) = cache.input.dims3();
        let cout = self.out_channels();
        let (oh, ow) = (2 * h, 2 * w);
        assert_eq!(dy.shape(), &[cout, oh, ow], "transposed conv backward shape");
        let hw = h * w;
        let d = dy.data();
        let mut dblocks = vec![T::zero(); cout * 4 * hw];
        for co in 0..cout {
            let mut bsum = T::zero();
            for a in 0..2 {
                for b in 0..2 {
                    let dst = &mut dblocks[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..h {
                        let row = (co * oh + 2 * i + a) * ow;
                        for j in 0..w {
                            let v = d[row + 2 * j + b];
                            dst[i * w + j] = v;
                            bsum += v;
                        }
                    }
                }
            }
            grad.bias.data_mut()[co] += bsum;
        }
        gemm(cin, hw, cout * 4, cache.input.data(), false, &dblocks, true, grad.weight.data_mut(), true);
        let mut dx = vec![T::zero(); cin * hw];
        gemm(cin, cout * 4, hw, self.weight.data(), false, &dblocks, false, &mut dx, false);
        Tensor::from_vec(&[cin, h, w], dx).expect("dx shape")
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2x2<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
