//! Inference protocols.
//!
//! The full protocol scales each video's shorter side to the eval size,
//! takes three square crops along the longer side, samples several clips,
//! and averages the softmax of every (crop, clip) view. The quick protocol
//! uses one centre crop at the training size and centre-of-segment frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::augment::{resize_region, Geometry, Region};
use crate::data::sampler::{center_indices, sample_segments, SamplerConfig};
use crate::data::{stack, VideoClip};
use crate::engine::train::argmax;
use crate::error::{Error, Result};
use crate::network::{forward_classify, ModelConfig};
use crate::params::Parameters;
use crate::tensor::Tensor;

/// Row-wise softmax of `(N, K)` logits.
pub fn softmax_rows(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// `count` square windows of side `min(h, w)` spread along the longer axis.
pub fn crop_regions(h: usize, w: usize, count: usize) -> Vec<Region> {
    let side = h.min(w);
    let slack = h.max(w) - side;
    (0..count)
        .map(|i| {
            let off = if count == 1 { slack / 2 } else { i * slack / (count - 1) };
            if w >= h {
                Region { y0: 0, x0: off, h: side, w: side }
            } else {
                Region { y0: off, x0: 0, h: side, w: side }
            }
        })
        .collect()
}

/// Protocol settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub crops: usize,
    pub clips: usize,
    pub size: usize,
    pub seed: u64,
}

/// Averaged class probabilities for one video over `crops x clips` views.
pub fn predict_video(params: &Parameters<f32>, model: &ModelConfig, video: &VideoClip, p: &Protocol, index: usize) -> Result<Vec<f64>> {
    let t = model.segments;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index as u64);
    let sampler = SamplerConfig::uniform(t);
    let regions = crop_regions(video.height(), video.width(), p.crops);
    let mut views = Vec::with_capacity(p.crops * p.clips);
    for _ in 0..p.clips {
        let idx = sample_segments(video.len(), &sampler, &mut rng)?;
        let (rgb, _) = video.gather(&idx);
        for r in &regions {
            views.push(resize_region(&rgb, t * 3, video.height(), video.width(), *r, p.size, p.size));
        }
    }
    let batch = stack(&views, &[views.len()])?;
    let probs = softmax_rows(&forward_classify(params, model, &batch)?);
    let k = model.num_classes;
    let mut avg = vec![0.0; k];
    for row in &probs {
        for (a, v) in avg.iter_mut().zip(row) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= probs.len() as f64);
    Ok(avg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("top1\t{:.4}\t{}/{}\n", self.accuracy(), self.correct, self.total);
        s += "confusion (rows: true, columns: predicted)\n";
        for row in &self.confusion {
            s += &row.iter().map(usize::to_string).collect::<Vec<_>>().join("\t");
            s.push('\n');
        }
        s
    }
}

pub fn evaluate(params: &Parameters<f32>, model: &ModelConfig, videos: &[VideoClip], p: &Protocol) -> Result<EvalReport> {
    let k = model.num_classes;
    let mut confusion = vec![vec![0; k]; k];
    let mut correct = 0;
    for (i, v) in videos.iter().enumerate() {
        if v.label >= k {
            return Err(Error::config(format!("video {i} has label {} but the model has {k} classes", v.label)));
        }
        let probs = predict_video(params, model, v, p, i)?;
        let pred = argmax(&probs.iter().map(|&x| x as f32).collect::<Vec<_>>());
        confusion[v.label][pred] += 1;
        correct += (pred == v.label) as usize;
    }
    Ok(EvalReport {
        correct,
        total: videos.len(),
        confusion,
    })
}

/// Centre crop at the training size and centre-of-segment frames.
pub fn center_view(video: &VideoClip, model: &ModelConfig) -> Result<Tensor<f32>> {
    let idx = center_indices(video.len(), model.segments);
    let (rgb, _) = video.gather(&idx);
    Geometry::center(model.input_size).apply(&rgb)
}

/// Quick single-view accuracy.
pub fn quick_accuracy(params: &Parameters<f32>, model: &ModelConfig, videos: &[VideoClip]) -> Result<f64> {
    if videos.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in videos.chunks(16) {
        let views = chunk.iter().map(|v| center_view(v, model)).collect::<Result<Vec<_>>>()?;
        let logits = forward_classify(params, model, &stack(&views, &[views.len()])?)?;
        let labels: Vec<usize> = chunk.iter().map(|v| v.label).collect();
        correct += crate::engine::train::count_correct(&logits, &labels);
    }
    Ok(correct as f64 / videos.len() as f64)
}
