//! Synthetic RGB-D gesture clips.
//!
//! A textured foreground blob follows the class trajectory. A smooth
//! distractor blob of the same mean colour follows a random trajectory from
//! the same set, over a cluttered static background. Depth is the
//! foreground's soft mask shaded by a radial gradient, zero elsewhere.
//!
//! Foreground and background draw from separate streams, so changing the
//! background seed leaves labels, foreground and depth untouched.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Right,
    Left,
    Up,
    Down,
    DiagonalDown,
    DiagonalUp,
    Circle,
    Zigzag,
}

impl Pattern {
    pub const ALL: [Pattern; 8] = [
        Pattern::Right,
        Pattern::Left,
        Pattern::Up,
        Pattern::Down,
        Pattern::DiagonalDown,
        Pattern::DiagonalUp,
        Pattern::Circle,
        Pattern::Zigzag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Right => "right",
            Pattern::Left => "left",
            Pattern::Up => "up",
            Pattern::Down => "down",
            Pattern::DiagonalDown => "diagonal-down",
            Pattern::DiagonalUp => "diagonal-up",
            Pattern::Circle => "circle",
            Pattern::Zigzag => "zigzag",
        }
    }

    /// Normalized `(y, x)` at time `u` in `[0, 1]`.
    pub fn position(self, u: f32, m: &Motion) -> (f32, f32) {
        let s = m.amplitude * (u - 0.5);
        let (cy, cx) = m.center;
        match self {
            Pattern::Right => (cy, cx + s),
            Pattern::Left => (cy, cx - s),
            Pattern::Down => (cy + s, cx),
            Pattern::Up => (cy - s, cx),
            Pattern::DiagonalDown => (cy + s * 0.75, cx + s * 0.75),
            Pattern::DiagonalUp => (cy - s * 0.75, cx + s * 0.75),
            Pattern::Circle => {
                let a = TAU * u + m.phase;
                (cy + 0.5 * m.amplitude * a.sin(), cx + 0.5 * m.amplitude * a.cos())
            }
            Pattern::Zigzag => {
                // two full triangle periods
                let tri = 1.0 - 4.0 * ((2.0 * u).fract() - 0.5).abs();
                (cy + m.amplitude * 0.3 * tri, cx + s)
            }
        }
    }
}

/// Per-clip trajectory parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub center: (f32, f32),
    pub amplitude: f32,
    pub phase: f32,
}

impl Motion {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Motion {
            center: (rng.gen_range(0.38..0.62), rng.gen_range(0.38..0.62)),
            amplitude: rng.gen_range(0.42..0.58),
            phase: rng.gen_range(0.0..TAU),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_clips: usize,
    pub classes: usize,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Seed of the background and distractor stream; defaults to `seed`.
    pub background_seed: Option<u64>,
    /// Relative contrast of the foreground texture.
    pub texture: f32,
    /// Blob radius as a fraction of the shorter frame side.
    pub radius: f32,
}

impl SynthConfig {
    pub fn new(num_clips: usize, classes: usize, length: usize, height: usize, width: usize, seed: u64) -> Self {
        SynthConfig {
            num_clips,
            classes,
            length,
            height,
            width,
            seed,
            background_seed: None,
            texture: 0.3,
            radius: 0.12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > Pattern::ALL.len() {
            return Err(Error::config(format!(
                "{} classes requested, only {} motion patterns exist",
                self.classes,
                Pattern::ALL.len()
            )));
        }
        if self.length == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::config("clips need at least one 8x8 frame"));
        }
        if !(0.0..=1.0).contains(&self.texture) || !(self.radius > 0.0 && self.radius < 0.5) {
            return Err(Error::config("texture must be in [0,1] and radius in (0,0.5)"));
        }
        Ok(())
    }
}

fn stream(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17));
    rng.set_stream(index as u64);
    rng
}

const FOREGROUND: u64 = 0x6667_5f66_6f72_6567;
const BACKGROUND: u64 = 0x6267_5f63_6c75_7474;

/// Label of clip `i`: classes cycle, so `num_clips % classes == 0` is exactly balanced.
pub fn label_of(i: usize, classes: usize) -> usize {
    i % classes
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<VideoClip>> {
    cfg.validate()?;
    (0..cfg.num_clips).map(|i| gen_clip(cfg, i)).collect()
}

struct Bump {
    y: f32,
    x: f32,
    sigma: f32,
    color: [f32; 3],
}

pub fn gen_clip(cfg: &SynthConfig, index: usize) -> Result<VideoClip> {
    let label = label_of(index, cfg.classes);
    let (h, w, l) = (cfg.height, cfg.width, cfg.length);
    let short = h.min(w) as f32;
    let mut fg = stream(cfg.seed, index, FOREGROUND);
    let mut bg = stream(cfg.background_seed.unwrap_or(cfg.seed), index, BACKGROUND);

    let fg_motion = Motion::draw(&mut fg);
    let fg_color: [f32; 3] = [0; 3].map(|_| fg.gen_range(0.65..0.95));
    let fg_radius = cfg.radius * short * fg.gen_range(0.9..1.1);
    let period = (fg_radius * fg.gen_range(0.45..0.6)).max(1.5);

    let base: [f32; 3] = [0; 3].map(|_| bg.gen_range(0.2..0.45));
    let bumps: Vec<Bump> = (0..6)
        .map(|_| Bump {
            y: bg.gen_range(0.0..h as f32),
            x: bg.gen_range(0.0..w as f32),
            sigma: short * bg.gen_range(0.08..0.25),
            color: [0; 3].map(|_| bg.gen_range(-0.25..0.25)),
        })
        .collect();
    let clutter: Vec<f32> = (0..3 * h * w).map(|_| bg.gen_range(-0.06..0.06)).collect();
    let distractor = Pattern::ALL[bg.gen_range(0..cfg.classes)];
    let d_motion = Motion::draw(&mut bg);
    let d_radius = cfg.radius * short * bg.gen_range(0.9..1.1);

    let mut background = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut v = base[c] + clutter[(c * h + y) * w + x];
                for b in &bumps {
                    let d2 = (y as f32 - b.y).powi(2) + (x as f32 - b.x).powi(2);
                    v += b.color[c] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                background[(c * h + y) * w + x] = v;
            }
        }
    }

    let pattern = Pattern::ALL[label];
    let mut frames = Vec::with_capacity(l * 3 * h * w);
    let mut depth = Vec::with_capacity(l * h * w);
    for t in 0..l {
        let u = if l > 1 { t as f32 / (l - 1) as f32 } else { 0.0 };
        let (fy, fx) = pattern.position(u, &fg_motion);
        let (fy, fx) = (fy * h as f32, fx * w as f32);
        let (dy, dx) = distractor.position(u, &d_motion);
        let (dy, dx) = (dy * h as f32, dx * w as f32);
        let noise: Vec<f32> = (0..3 * h * w).map(|_| bg.gen_range(-0.02..0.02)).collect();
        let mut depth_frame = vec![0f32; h * w];
        let mut rgb = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                let df = ((py - fy).powi(2) + (px - fx).powi(2)).sqrt();
                let dd = ((py - dy).powi(2) + (px - dx).powi(2)).sqrt();
                let mf = (fg_radius - df + 0.5).clamp(0.0, 1.0);
                let md = (d_radius - dd + 0.5).clamp(0.0, 1.0);
                let checker = if (((py - fy) / period).floor() + ((px - fx) / period).floor()) as i64 % 2 == 0 {
                    1.0
                } else {
                    -1.0
                };
                for c in 0..3 {
                    let i = (c * h + y) * w + x;
                    let mut v = background[i] + noise[i];
                    v = v * (1.0 - md) + fg_color[c] * md;
                    v = v * (1.0 - mf) + fg_color[c] * (1.0 + cfg.texture * checker) * mf;
                    rgb[i] = v.clamp(0.0, 1.0);
                }
                depth_frame[y * w + x] = mf * (1.0 - 0.5 * (df / fg_radius).min(1.0));
            }
        }
        frames.extend(rgb);
        depth.extend(depth_frame);
    }
    VideoClip::new(Tensor::new(&[l, 3, h, w], frames)?, Tensor::new(&[l, 1, h, w], depth)?, label)
}
