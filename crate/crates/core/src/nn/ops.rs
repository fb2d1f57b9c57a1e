//! Parameter-free tensor operations.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(dy: &mut Tensor<T>, output: &Tensor<T>) {
    for (d, &o) in dy.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Stacks two `C×H×W` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ca, h, w) = a.dims3();
    let (cb, hb, wb) = b.dims3();
    assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data).expect("concat shape")
}

/// Leading `channels` channels of a `C×H×W` tensor.
pub fn take_channels<T: Scalar>(x: &Tensor<T>, channels: usize) -> Tensor<T> {
    let (_, h, w) = x.dims3();
    Tensor::from_vec(&[channels, h, w], x.data()[..channels * h * w].to_vec()).expect("take shape")
}

/// Bilinear resize of a `C×H×W` tensor with half-pixel sample centres and
/// edge clamping.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, T::from_f64_lossy(src - i0 as f64))
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = plane[y0 * w + x0] * (T::one() - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (T::one() - tx) + plane[y1 * w + x1] * tx;
                out.push(top * (T::one() - ty) + bot * ty);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out).expect("resize shape")
}

/// Per-pixel index of the largest channel (ties resolve to the lowest index).
pub fn argmax_channels<T: Scalar>(x: &Tensor<T>) -> Vec<u32> {
    let (c, h, w) = x.dims3();
    let hw = h * w;
    let d = x.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            let mut best_v = d[p];
            for k in 1..c {
                let v = d[k * hw + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant_under_resize() {
        let x = Tensor::<f64>::full(&[2, 3, 5], 0.37);
        for (h, w) in [(1, 1), (7, 4), (64, 64)] {
            let y = resize_bilinear(&x, h, w);
            assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn checkerboard_upsample_uses_hand_computed_weights() {
        // 2×2 checkerboard [[1,0],[0,1]] → 4×4. Output pixel 1 samples source
        // coordinate 0.25, so weights are 0.75 / 0.25 along each axis.
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, 4, 4);
        let at = |r: usize, c: usize| y.data()[r * 4 + c];
        let near = 0.75 * 0.75 + 0.25 * 0.25; // 0.625
        let far = 2.0 * 0.75 * 0.25; // 0.375
        assert!((at(1, 1) - near).abs() < 1e-15);
        assert!((at(2, 2) - near).abs() < 1e-15);
        assert!((at(1, 2) - far).abs() < 1e-15);
        assert!((at(2, 1) - far).abs() < 1e-15);
        // the central block averages to the mean of the four source pixels
        let centre = (at(1, 1) + at(1, 2) + at(2, 1) + at(2, 2)) / 4.0;
        assert!((centre - 0.5).abs() < 1e-15);
        // corners clamp to the source values
        assert_eq!(at(0, 0), 1.0);
        assert_eq!(at(0, 3), 0.0);
    }

    #[test]
    fn argmax_ties_pick_lowest_channel() {
        let x = Tensor::<f32>::from_vec(&[3, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_channels(&x), vec![0, 1]);
    }
}
