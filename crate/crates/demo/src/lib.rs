//! Browser demo: a synthetic RGB-D gesture clip, its binarized two-scale
//! depth targets and the motion feature of consecutive frames.
//!
//! Every image comes back as RGBA bytes ready for `ImageData`.

use actnet::action::motion_diff;
use actnet::data::depth::{binarize_depth, depth_targets};
use actnet::data::synth::{gen_clip, Pattern, SynthConfig};
use actnet::data::VideoClip;
use actnet::{Tape, Tensor};
use wasm_bindgen::prelude::*;

const SIZE: usize = 64;
const LENGTH: usize = 16;

#[wasm_bindgen]
pub struct Demo {
    clip: VideoClip,
    pattern: &'static str,
}

fn gray_rgba(plane: &[f32], scale: f32) -> Vec<u8> {
    plane
        .iter()
        .flat_map(|&v| {
            let g = (v * scale).clamp(0.0, 1.0);
            let b = (g * 255.0).round() as u8;
            [b, b, b, 255]
        })
        .collect()
}

/// Nearest-neighbour upscale of a square plane by an integer factor.
fn upscale(plane: &[f32], side: usize, factor: usize) -> Vec<f32> {
    let big = side * factor;
    (0..big * big).map(|i| plane[(i / big / factor) * side + (i % big) / factor]).collect()
}

#[wasm_bindgen]
impl Demo {
    /// Clip of class `class` (0..8) drawn from `seed`. `texture` sets the
    /// foreground contrast in `[0, 1]`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, class: u32, texture: f32) -> Demo {
        let classes = Pattern::ALL.len();
        let class = class as usize % classes;
        let cfg = SynthConfig {
            texture: texture.clamp(0.0, 1.0),
            ..SynthConfig::new(classes, classes, LENGTH, SIZE, SIZE, seed as u64)
        };
        let clip = gen_clip(&cfg, class).expect("fixed geometry is valid");
        Demo {
            clip,
            pattern: Pattern::ALL[class].name(),
        }
    }

    pub fn size(&self) -> usize {
        SIZE
    }

    pub fn frames(&self) -> usize {
        LENGTH
    }

    pub fn pattern(&self) -> String {
        self.pattern.to_string()
    }

    /// Colour frame `t`.
    pub fn rgb(&self, t: usize) -> Vec<u8> {
        let t = t.min(LENGTH - 1);
        let plane = SIZE * SIZE;
        let f = &self.clip.frames.data()[t * 3 * plane..][..3 * plane];
        (0..plane)
            .flat_map(|i| {
                let c = |k: usize| (f[k * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
                [c(0), c(1), c(2), 255]
            })
            .collect()
    }

    fn depth_plane(&self, t: usize) -> Tensor<f32> {
        let t = t.min(LENGTH - 1);
        let plane = SIZE * SIZE;
        let d = self.clip.depth.data()[t * plane..][..plane].to_vec();
        Tensor::new(&[1, 1, SIZE, SIZE], d).expect("plane shape")
    }

    /// Raw depth of frame `t`.
    pub fn depth(&self, t: usize) -> Vec<u8> {
        gray_rgba(self.depth_plane(t).data(), 1.0)
    }

    /// Depth binarized at the 8-bit `threshold`, then the full-size local
    /// target and the quarter-size global target side by side, the latter
    /// upscaled for display. The result is `2 * size` wide.
    pub fn targets(&self, t: usize, threshold: u8) -> Vec<u8> {
        let binary = binarize_depth(&self.depth_plane(t), threshold);
        let (local, global) = depth_targets(&binary).expect("size divisible by 4");
        let left = gray_rgba(local.data(), 1.0);
        let right = gray_rgba(&upscale(global.data(), SIZE / 4, 4), 1.0);
        let row = SIZE * 4;
        (0..SIZE).flat_map(|y| [&left[y * row..][..row], &right[y * row..][..row]].concat()).collect()
    }

    /// Magnitude of `f[t+1] - f[t]` over the colour channels, the motion
    /// feature with an identity kernel. Zero for the last frame.
    pub fn motion(&self, t: usize, gain: f32) -> Vec<u8> {
        let t = t.min(LENGTH - 1);
        let tape = Tape::<f32>::new();
        let x = tape.constant(self.clip.frames.reshape(&[1, LENGTH, 3, SIZE, SIZE]).expect("clip shape"));
        let mut k = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            k[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let k = tape.constant(Tensor::new(&[3, 3, 3, 3], k).expect("kernel shape"));
        let d = motion_diff(&x, &k, None).expect("clip shape").value();
        let plane = SIZE * SIZE;
        let f = &d.data()[t * 3 * plane..][..3 * plane];
        let mag: Vec<f32> = (0..plane).map(|i| (0..3).map(|c| f[c * plane + i].abs()).sum::<f32>() / 3.0).collect();
        gray_rgba(&mag, gain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_have_rgba_size() {
        let d = Demo::new(1, 2, 0.3);
        assert_eq!(d.pattern(), "up");
        let px = SIZE * SIZE * 4;
        assert_eq!(d.rgb(0).len(), px);
        assert_eq!(d.depth(3).len(), px);
        assert_eq!(d.targets(3, 10).len(), 2 * px);
        assert_eq!(d.motion(5, 4.0).len(), px);
    }

    #[test]
    fn targets_are_binary_and_motion_ends_at_zero() {
        let d = Demo::new(7, 6, 0.3);
        let local = d.targets(4, 10);
        assert!(local.chunks(4).all(|p| p[3] == 255));
        let row = SIZE * 4;
        let left: Vec<u8> = (0..SIZE).flat_map(|y| local[2 * y * row..][..row].to_vec()).collect();
        assert!(left.iter().all(|&b| b == 0 || b == 255));
        assert!(left.chunks(4).any(|p| p[0] == 255));
        assert!(d.motion(LENGTH - 1, 10.0).chunks(4).all(|p| p[0] == 0));
        assert!(d.motion(0, 10.0).chunks(4).any(|p| p[0] > 0));
    }

    #[test]
    fn same_seed_same_clip() {
        assert_eq!(Demo::new(3, 1, 0.5).rgb(2), Demo::new(3, 1, 0.5).rgb(2));
        assert_ne!(Demo::new(3, 1, 0.5).rgb(2), Demo::new(4, 1, 0.5).rgb(2));
    }
}
