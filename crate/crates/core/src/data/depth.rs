//! Depth preprocessing: binarization and two-scale regression targets.

use crate::error::{Error, Result};
use crate::kernels::bilinear_forward;
use crate::tensor::Tensor;

/// Raw 8-bit depth: strictly above `threshold` becomes 255, everything else 0.
pub fn binarize_raw(pixels: &[u8], threshold: u8) -> Vec<u8> {
    pixels.iter().map(|&p| if p > threshold { 255 } else { 0 }).collect()
}

/// Normalized depth in `[0, 1]`. Values are compared at 8-bit resolution,
/// `round(255 v) > threshold`, and mapped to `{0, 1}`.
pub fn binarize_depth(depth: &Tensor<f32>, threshold: u8) -> Tensor<f32> {
    depth.map(|v| {
        if (v.clamp(0.0, 1.0) * 255.0).round() > threshold as f32 {
            1.0
        } else {
            0.0
        }
    })
}

/// Full-resolution and quarter-resolution targets for `(M, 1, S, S)` depth.
pub fn depth_targets(depth: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = depth.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("depth_targets", format!("expected (M,1,S,S), got {s:?}")));
    }
    let (m, h, w) = (s[0], s[2], s[3]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape("depth_targets", format!("{h}x{w} is not divisible by 4")));
    }
    let small = bilinear_forward(depth.data(), m, h, w, h / 4, w / 4);
    Ok((depth.clone(), Tensor::new(&[m, 1, h / 4, w / 4], small)?))
}
