//! Geometric and photometric augmentation.
//!
//! Geometry (scale jitter plus corner or centre crop) is drawn once and
//! applied identically to RGB and depth so the two stay aligned. Colour
//! jitter touches RGB only.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the shorter frame side.
    pub scales: Vec<f64>,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scales: vec![1.0, 7.0 / 8.0, 3.0 / 4.0, 2.0 / 3.0],
            jitter_prob: 0.4,
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
        }
    }
}

impl AugmentConfig {
    /// No scale jitter and no colour jitter.
    pub fn none() -> Self {
        AugmentConfig {
            scales: vec![1.0],
            jitter_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::config("crop scales must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.jitter_prob) {
            return Err(Error::config(format!("jitter probability {} outside [0, 1]", self.jitter_prob)));
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(format!("{name} strength {s} outside [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config(format!("hue strength {} outside [0, 0.5]", self.hue)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl CropPosition {
    pub const ALL: [CropPosition; 5] = [
        CropPosition::TopLeft,
        CropPosition::TopRight,
        CropPosition::BottomLeft,
        CropPosition::BottomRight,
        CropPosition::Center,
    ];

    /// Top-left corner of a `ch x cw` window inside `h x w`.
    pub fn origin(self, h: usize, w: usize, ch: usize, cw: usize) -> (usize, usize) {
        let (dy, dx) = (h - ch, w - cw);
        match self {
            CropPosition::TopLeft => (0, 0),
            CropPosition::TopRight => (0, dx),
            CropPosition::BottomLeft => (dy, 0),
            CropPosition::BottomRight => (dy, dx),
            CropPosition::Center => (dy / 2, dx / 2),
        }
    }
}

/// A square crop resized to `size x size`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub scale: f64,
    pub position: CropPosition,
    pub size: usize,
}

impl Geometry {
    pub fn draw<R: Rng + ?Sized>(aug: &AugmentConfig, size: usize, rng: &mut R) -> Self {
        Geometry {
            scale: aug.scales[rng.gen_range(0..aug.scales.len())],
            position: CropPosition::ALL[rng.gen_range(0..CropPosition::ALL.len())],
            size,
        }
    }

    pub fn center(size: usize) -> Self {
        Geometry {
            scale: 1.0,
            position: CropPosition::Center,
            size,
        }
    }

    /// Crop window `(y0, x0, side)` in an `h x w` frame.
    pub fn window(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if h.min(w) < self.size {
            return Err(Error::shape(
                "crop_scale_jitter",
                format!("frame {h}x{w} has a shorter side below the output size {}", self.size),
            ));
        }
        let side = ((h.min(w) as f64 * self.scale).round() as usize).clamp(1, h.min(w));
        let (y0, x0) = self.position.origin(h, w, side, side);
        Ok((y0, x0, side))
    }

    /// Apply to a `(L, C, H, W)` stack.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("crop_scale_jitter", format!("expected (L,C,H,W), got {s:?}")));
        }
        let (y0, x0, side) = self.window(s[2], s[3])?;
        let region = Region { y0, x0, h: side, w: side };
        Ok(resize_region(x, s[0] * s[1], s[2], s[3], region, self.size, self.size))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

fn taps(offset: usize, input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (offset + lo, offset + hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a sub-window of each of `planes` images.
pub fn resize_region(x: &Tensor<f32>, planes: usize, h: usize, w: usize, r: Region, oh: usize, ow: usize) -> Tensor<f32> {
    let ty = taps(r.y0, r.h, oh);
    let tx = taps(r.x0, r.w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let img = &x.data()[p * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
                let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(&shape, out).expect("resize output length")
}

/// Same crop and scale for RGB `(L,3,H,W)` and depth `(L,1,H,W)`.
pub fn crop_scale_jitter(rgb: &Tensor<f32>, depth: &Tensor<f32>, geometry: &Geometry) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if rgb.shape()[2..] != depth.shape()[2..] {
        return Err(Error::shape("crop_scale_jitter", "RGB and depth frames differ in size"));
    }
    Ok((geometry.apply(rgb)?, geometry.apply(depth)?))
}

/// Photometric parameters; `None` fields are skipped.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ColorJitter {
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
    pub saturation: Option<f32>,
    /// Hue rotation as a fraction of a full turn.
    pub hue: Option<f32>,
}

impl ColorJitter {
    /// Identity with probability `1 - jitter_prob`, otherwise every factor
    /// drawn from `[1 - s, 1 + s]` and the hue shift from `[-hue, hue]`.
    pub fn draw<R: Rng + ?Sized>(aug: &AugmentConfig, rng: &mut R) -> Self {
        let p: f64 = rng.gen();
        if p >= aug.jitter_prob {
            return ColorJitter::default();
        }
        let mut factor = |s: f64| Some(rng.gen_range(1.0 - s..=1.0 + s) as f32);
        let brightness = factor(aug.brightness);
        let contrast = factor(aug.contrast);
        let saturation = factor(aug.saturation);
        let hue = Some(rng.gen_range(-aug.hue..=aug.hue) as f32);
        ColorJitter {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == ColorJitter::default()
    }

    /// Apply to an `(L, 3, H, W)` stack, frame by frame. Order is brightness,
    /// contrast, saturation, hue, each clamped to `[0, 1]`.
    pub fn apply(&self, rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = rgb.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("color_jitter", format!("expected (L,3,H,W), got {s:?}")));
        }
        if self.is_identity() {
            return Ok(rgb.clone());
        }
        let plane = s[2] * s[3];
        let mut out = rgb.clone();
        for frame in out.data_mut().chunks_mut(3 * plane) {
            let (r, rest) = frame.split_at_mut(plane);
            let (g, b) = rest.split_at_mut(plane);
            if let Some(f) = self.brightness {
                for v in r.iter_mut().chain(g.iter_mut()).chain(b.iter_mut()) {
                    *v = (*v * f).clamp(0.0, 1.0);
                }
            }
            if let Some(f) = self.contrast {
                let mean = (0..plane).map(|i| gray(r[i], g[i], b[i])).sum::<f32>() / plane as f32;
                for v in r.iter_mut().chain(g.iter_mut()).chain(b.iter_mut()) {
                    *v = (mean + (*v - mean) * f).clamp(0.0, 1.0);
                }
            }
            if let Some(f) = self.saturation {
                for i in 0..plane {
                    let y = gray(r[i], g[i], b[i]);
                    r[i] = (y + (r[i] - y) * f).clamp(0.0, 1.0);
                    g[i] = (y + (g[i] - y) * f).clamp(0.0, 1.0);
                    b[i] = (y + (b[i] - y) * f).clamp(0.0, 1.0);
                }
            }
            if let Some(turn) = self.hue {
                let rot = hue_rotation(turn);
                for i in 0..plane {
                    let (pr, pg, pb) = (r[i], g[i], b[i]);
                    r[i] = (rot[0][0] * pr + rot[0][1] * pg + rot[0][2] * pb).clamp(0.0, 1.0);
                    g[i] = (rot[1][0] * pr + rot[1][1] * pg + rot[1][2] * pb).clamp(0.0, 1.0);
                    b[i] = (rot[2][0] * pr + rot[2][1] * pg + rot[2][2] * pb).clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// RGB matrix rotating chroma about the grey axis by `turn` of a circle.
fn hue_rotation(turn: f32) -> [[f32; 3]; 3] {
    let a = turn * std::f32::consts::TAU;
    let (s, c) = a.sin_cos();
    let k = (1.0 - c) / 3.0;
    let q = (1.0f32 / 3.0).sqrt() * s;
    [
        [c + k, k - q, k + q],
        [k + q, c + k, k - q],
        [k - q, k + q, c + k],
    ]
}

/// Draw and apply colour jitter to an RGB stack.
pub fn color_jitter<R: Rng + ?Sized>(rgb: &Tensor<f32>, aug: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    ColorJitter::draw(aug, rng).apply(rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(l: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[l, c, h, w], |i| (i % 97) as f32 / 97.0)
    }

    #[test]
    fn unit_scale_center_crop_of_square_is_identity() {
        let x = ramp(2, 3, 16, 16);
        assert_eq!(Geometry::center(16).apply(&x).unwrap(), x);
    }

    #[test]
    fn output_is_square_for_every_scale() {
        let x = ramp(1, 1, 18, 24);
        for &scale in &AugmentConfig::default().scales {
            for position in CropPosition::ALL {
                let g = Geometry { scale, position, size: 16 };
                assert_eq!(g.apply(&x).unwrap().shape(), &[1, 1, 16, 16]);
            }
        }
    }

    #[test]
    fn small_frame_rejected() {
        let x = ramp(1, 1, 12, 30);
        assert!(Geometry::center(16).apply(&x).is_err());
    }

    #[test]
    fn rgb_and_depth_stay_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let depth = Tensor::from_fn(&[1, 1, 20, 28], |i| if i % 28 == 9 && i / 28 == 5 { 1.0 } else { 0.0 });
        let mut rgb = Tensor::zeros(&[1, 3, 20, 28]);
        for c in 0..3 {
            rgb.data_mut()[c * 560..][..560].copy_from_slice(depth.data());
        }
        for _ in 0..20 {
            let g = Geometry::draw(&AugmentConfig::default(), 16, &mut rng);
            let (r, d) = crop_scale_jitter(&rgb, &depth, &g).unwrap();
            for c in 0..3 {
                assert_eq!(&r.data()[c * 256..][..256], d.data());
            }
        }
    }

    #[test]
    fn identity_jitter_and_bounds() {
        let x = ramp(2, 3, 4, 4);
        assert_eq!(ColorJitter::default().apply(&x).unwrap(), x);
        let unit = ColorJitter {
            brightness: Some(1.0),
            ..Default::default()
        };
        assert_eq!(unit.apply(&x).unwrap(), x);
        let strong = ColorJitter {
            brightness: Some(1.8),
            contrast: Some(1.8),
            saturation: Some(0.2),
            hue: Some(0.2),
        };
        let (lo, hi) = strong.apply(&x).unwrap().min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn zero_probability_never_jitters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(ColorJitter::draw(&AugmentConfig::none(), &mut rng).is_identity());
        }
    }

    #[test]
    fn grey_is_hue_invariant() {
        let x = Tensor::full(&[1, 3, 2, 2], 0.4f32);
        let y = ColorJitter {
            hue: Some(0.2),
            ..Default::default()
        }
        .apply(&x)
        .unwrap();
        assert!(y.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }
}
