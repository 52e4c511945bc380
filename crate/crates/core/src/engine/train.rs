//! Mini-batch assembly and the SGD training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::augment::{crop_scale_jitter, ColorJitter, Geometry};
use crate::data::depth::{binarize_depth, depth_targets};
use crate::data::sampler::sample_segments;
use crate::data::{stack, VideoClip};
use crate::engine::config::RunConfig;
use crate::engine::eval::quick_accuracy;
use crate::error::{Error, Result};
use crate::loss::{combine, cross_entropy, mse_global, mse_local};
use crate::network::{build_model, forward, has_msd, ModelConfig};
use crate::optim::{collect, sgd_step, OptimConfig};
use crate::params::Parameters;
use crate::tensor::Tensor;

/// Network input and targets for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(N, T, 3, S, S)`
    pub clip: Tensor<f32>,
    /// `(N*T, 1, S, S)`
    pub local: Tensor<f32>,
    /// `(N*T, 1, S/4, S/4)`
    pub global: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Sample, crop, jitter and stack `clips` into one training batch.
pub fn make_batch<R: Rng + ?Sized>(clips: &[&VideoClip], cfg: &RunConfig, rng: &mut R) -> Result<Batch> {
    let size = cfg.model.input_size;
    let mut rgbs = Vec::with_capacity(clips.len());
    let mut depths = Vec::with_capacity(clips.len());
    for clip in clips {
        let idx = sample_segments(clip.len(), &cfg.sampler, rng)?;
        let (rgb, depth) = clip.gather(&idx);
        let geometry = Geometry::draw(&cfg.augment, size, rng);
        let (rgb, mut depth) = crop_scale_jitter(&rgb, &depth, &geometry)?;
        let rgb = ColorJitter::draw(&cfg.augment, rng).apply(&rgb)?;
        if let Some(t) = cfg.binarize_threshold {
            depth = binarize_depth(&depth, t);
        }
        rgbs.push(rgb);
        depths.push(depth);
    }
    let n = clips.len();
    let t = cfg.model.segments;
    let clip = stack(&rgbs, &[n])?;
    let depth = stack(&depths, &[n])?.reshape(&[n * t, 1, size, size])?;
    let (local, global) = depth_targets(&depth)?;
    Ok(Batch {
        clip,
        local,
        global,
        labels: clips.iter().map(|c| c.label).collect(),
    })
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub local: f64,
    pub global: f64,
    pub total: f64,
    pub correct: usize,
}

/// Forward, backward and one SGD update. Decoders run whenever the
/// parameters contain them and the model enables them.
pub fn train_step(params: &mut Parameters<f32>, model: &ModelConfig, batch: &Batch, lr: f64, optim: &OptimConfig) -> Result<StepLosses> {
    let with_msd = model.msd_enabled && has_msd(params);
    // the tape must be gone before the update so parameter storage is not shared
    let (losses, g) = {
        let tape = Tape::<f32>::new();
        let bound = params.bind(&tape, true);
        let x = tape.constant(batch.clip.clone());
        let out = forward(&bound, model, &x, with_msd)?;
        let l_cls = cross_entropy(&out.logits, &batch.labels)?;
        let (l_local, l_global) = match (out.local_mask, out.global_mask) {
            (Some(lm), Some(gm)) => (
                Some(mse_local(&lm, &tape.constant(batch.local.clone()))?),
                Some(mse_global(&gm, &tape.constant(batch.global.clone()))?),
            ),
            _ => (None, None),
        };
        let terms = combine(l_cls, l_local, l_global, &model.loss)?;
        let item = |v: &Var<'_, f32>| v.value().item() as f64;
        let losses = StepLosses {
            cls: item(&terms.cls),
            local: terms.local.as_ref().map_or(0.0, item),
            global: terms.global.as_ref().map_or(0.0, item),
            total: item(&terms.total),
            correct: count_correct(&out.logits.value(), &batch.labels),
        };
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", losses.total)));
        }
        let grads = tape.backward(terms.total)?;
        (losses, collect(&grads, bound.vars()))
    };
    sgd_step(params, &g, lr, optim)?;
    Ok(losses)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    pub local: f64,
    pub global: f64,
    pub total: f64,
    /// Fraction of augmented training clips classified correctly during the epoch.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

pub struct TrainOutcome {
    pub params: Parameters<f32>,
    /// Parameters at the epoch with the best validation accuracy.
    pub best: Option<(usize, f64, Parameters<f32>)>,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

pub const METRICS_HEADER: &str = "step\tepoch\tlr\tl_cls\tl_local\tl_global\ttotal";
pub const EPOCHS_HEADER: &str = "epoch\tlr\tl_cls\tl_local\tl_global\ttotal\ttrain_acc\tval_acc";

/// Stream seeded by the run seed; epochs use distinct streams.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

/// Train from a fresh initialization. One metrics line per step goes to
/// `metrics`, one summary line per epoch to `epochs_log`.
pub fn train(
    cfg: &RunConfig,
    train_set: &[VideoClip],
    val_set: &[VideoClip],
    metrics: &mut dyn Write,
    epochs_log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(c) = train_set.iter().chain(val_set).find(|c| c.label >= cfg.model.num_classes) {
        return Err(Error::config(format!(
            "clip label {} exceeds model.classes = {}",
            c.label, cfg.model.num_classes
        )));
    }
    let mut params = build_model(&cfg.model, cfg.seed)?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    writeln!(epochs_log, "{EPOCHS_HEADER}")?;
    let mut step = 0usize;
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, Parameters<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.optim.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let clips: Vec<&VideoClip> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch(&clips, cfg, &mut rng)?;
            let l = train_step(&mut params, &cfg.model, &batch, lr, &cfg.optim).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at step {step} (epoch {epoch})")),
                other => other,
            })?;
            writeln!(
                metrics,
                "{step}\t{epoch}\t{lr}\t{}\t{}\t{}\t{}",
                l.cls as f32, l.local as f32, l.global as f32, l.total as f32
            )?;
            sums.cls += l.cls;
            sums.local += l.local;
            sums.global += l.global;
            sums.total += l.total;
            sums.correct += l.correct;
            batches += 1;
            step += 1;
        }
        let nb = batches as f64;
        let val_acc = if cfg.val_every > 0 && !val_set.is_empty() && (epoch + 1) % cfg.val_every == 0 {
            Some(quick_accuracy(&params, &cfg.model, val_set)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            lr,
            cls: sums.cls / nb,
            local: sums.local / nb,
            global: sums.global / nb,
            total: sums.total / nb,
            train_acc: sums.correct as f64 / train_set.len() as f64,
            val_acc,
        };
        let val_text = val_acc.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            epochs_log,
            "{epoch}\t{lr}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{val_text}",
            rec.cls, rec.local, rec.global, rec.total, rec.train_acc
        )?;
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}) train acc {:.3} val acc {val_text}",
            rec.total,
            rec.cls,
            rec.train_acc
        );
        if let Some(v) = val_acc {
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((epoch, v, params.clone()));
            }
        }
        records.push(rec);
    }
    Ok(TrainOutcome {
        params,
        best,
        epochs: records,
        steps: step,
    })
}
