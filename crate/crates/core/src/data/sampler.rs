//! Frame index selection for a clip of length `L`.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// One random frame from each of `T` equal segments.
    Uniform,
    /// `T` frames `stride` apart from a random start.
    Dense,
}

impl SamplerMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(SamplerMode::Uniform),
            "dense" => Some(SamplerMode::Dense),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Uniform => "uniform",
            SamplerMode::Dense => "dense",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub segments: usize,
    pub stride: usize,
}

impl SamplerConfig {
    pub fn uniform(segments: usize) -> Self {
        SamplerConfig {
            mode: SamplerMode::Uniform,
            segments,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.stride == 0 {
            return Err(Error::config("sampler needs segments >= 1 and stride >= 1"));
        }
        Ok(())
    }
}

/// Segment `k` of `len` frames split `t` ways: `[floor(k*len/t), floor((k+1)*len/t))`.
pub fn segment_bounds(len: usize, t: usize, k: usize) -> (usize, usize) {
    (k * len / t, (k + 1) * len / t)
}

pub fn sample_segments<R: Rng + ?Sized>(len: usize, cfg: &SamplerConfig, rng: &mut R) -> Result<Vec<usize>> {
    cfg.validate()?;
    let t = cfg.segments;
    match cfg.mode {
        SamplerMode::Uniform => {
            if len < t {
                return Err(Error::config(format!("uniform sampling needs at least {t} frames, clip has {len}")));
            }
            Ok((0..t)
                .map(|k| {
                    let (lo, hi) = segment_bounds(len, t, k);
                    rng.gen_range(lo..hi)
                })
                .collect())
        }
        SamplerMode::Dense => {
            if len == 0 {
                return Err(Error::config("cannot sample from an empty clip"));
            }
            let span = (t - 1) * cfg.stride + 1;
            let start = if len > span { rng.gen_range(0..=len - span) } else { 0 };
            // short clips repeat their last frame
            Ok((0..t).map(|k| (start + k * cfg.stride).min(len - 1)).collect())
        }
    }
}

/// Deterministic middle-of-segment indices.
pub fn center_indices(len: usize, t: usize) -> Vec<usize> {
    (0..t)
        .map(|k| {
            let (lo, hi) = segment_bounds(len, t, k);
            (lo + hi.max(lo + 1) - 1) / 2
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_when_length_equals_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_segments(8, &SamplerConfig::uniform(8), &mut rng).unwrap(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn short_clip_rejected_in_uniform_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_segments(7, &SamplerConfig::uniform(8), &mut rng).is_err());
    }

    #[test]
    fn dense_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SamplerConfig {
            mode: SamplerMode::Dense,
            segments: 4,
            stride: 2,
        };
        let idx = sample_segments(20, &cfg, &mut rng).unwrap();
        assert!(idx.windows(2).all(|w| w[1] == w[0] + 2));
        assert!(*idx.last().unwrap() < 20);
        assert_eq!(sample_segments(3, &cfg, &mut rng).unwrap(), [0, 2, 2, 2]);
    }

    #[test]
    fn centers() {
        assert_eq!(center_indices(16, 8), [0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(center_indices(24, 8), [1, 4, 7, 10, 13, 16, 19, 22]);
    }
}
