//! Layers with hand-written backward passes.
//!
//! Every layer works on a single sample. Forward returns the output plus a
//! cache; backward consumes the cache, accumulates parameter gradients into
//! a gradient value of the same type as the layer, and returns the gradient
//! with respect to the input.

mod adam;
mod conv;
mod conv_transpose;
mod linear;
pub mod ops;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use conv::{Conv2d, ConvCache};
pub use conv_transpose::{ConvTranspose2x2, ConvTransposeCache};
pub use linear::Linear;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything holding trainable tensors in a fixed, named order.
///
/// `params` and `params_mut` must enumerate tensors in the same order; the
/// optimizer and the checkpoint writer both rely on that.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T: Scalar>(
    prefix: &str,
    items: Vec<(String, &'a Tensor<T>)>,
) -> Vec<(String, &'a Tensor<T>)> {
    items
        .into_iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t))
        .collect()
}

/// Uniform `[-bound, bound)` with `bound = sqrt(6 / fan_in)` (He, for ReLU stacks).
pub(crate) fn he_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}
