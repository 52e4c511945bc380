//! Clips, synthetic generation, sampling, augmentation and depth targets.

pub mod augment;
pub mod clipset;
pub mod depth;
pub mod pgm;
pub mod sampler;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB frames `(L, 3, H, W)` and depth `(L, 1, H, W)`, both in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub label: usize,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, depth: Tensor<f32>, label: usize) -> Result<Self> {
        let clip = VideoClip { frames, depth, label };
        clip.check()?;
        Ok(clip)
    }

    fn check(&self) -> Result<()> {
        let f = self.frames.shape();
        let d = self.depth.shape();
        if f.len() != 4 || f[1] != 3 {
            return Err(Error::shape("clip", format!("frames must be (L,3,H,W), got {f:?}")));
        }
        if d != [f[0], 1, f[2], f[3]] {
            return Err(Error::shape("clip", format!("depth {d:?} does not match frames {f:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim(2)
    }

    pub fn width(&self) -> usize {
        self.frames.dim(3)
    }

    /// Frames and depth at `indices`, stacked in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let (h, w) = (self.height(), self.width());
        let pick = |t: &Tensor<f32>, c: usize| {
            let plane = c * h * w;
            let mut out = Vec::with_capacity(indices.len() * plane);
            for &i in indices {
                out.extend_from_slice(&t.data()[i * plane..][..plane]);
            }
            Tensor::new(&[indices.len(), c, h, w], out).expect("gathered length matches")
        };
        (pick(&self.frames, 3), pick(&self.depth, 1))
    }
}

/// Concatenate equally shaped tensors under new leading axes `lead`.
pub(crate) fn stack(parts: &[Tensor<f32>], lead: &[usize]) -> Result<Tensor<f32>> {
    let inner = parts.first().map(|p| p.shape().to_vec()).unwrap_or_default();
    if parts.iter().any(|p| p.shape() != inner.as_slice()) {
        return Err(Error::shape("stack", "parts differ in shape"));
    }
    let mut shape = lead.to_vec();
    shape.extend(&inner);
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}
