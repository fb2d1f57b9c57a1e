use rand::Rng;

use super::{he_uniform, Module};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Fully connected layer `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            weight: he_uniform(&[out_features, in_features], in_features, rng),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.in_features(), "linear input length");
        let mut y = self.bias.data().to_vec();
        gemm(self.out_features(), self.in_features(), 1, self.weight.data(), false, x, false, &mut y, true);
        y
    }

    /// Accumulates parameter gradients for input `x` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let (o, i) = (self.out_features(), self.in_features());
        gemm(o, 1, i, dy, false, x, false, grad.weight.data_mut(), true);
        for (g, &d) in grad.bias.data_mut().iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![T::zero(); i];
        gemm(i, o, 1, self.weight.data(), true, dy, false, &mut dx, false);
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
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

    #[test]
    fn forward_and_backward_by_hand() {
        let layer = Linear::<f64> {
            weight: Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap(),
            bias: Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap(),
        };
        let x = [1.0, -1.0, 2.0];
        assert_eq!(layer.forward(&x), vec![5.5, -2.0]);
        let mut g = layer.zeros_like();
        let dx = layer.backward(&x, &[1.0, 2.0], &mut g);
        assert_eq!(g.weight.data(), &[1.0, -1.0, 2.0, 2.0, -2.0, 4.0]);
        assert_eq!(g.bias.data(), &[1.0, 2.0]);
        assert_eq!(dx, vec![-1.0, 3.0, 3.0]);
    }
}
