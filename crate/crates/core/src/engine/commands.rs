//! The five CLI commands as library functions.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autograd::OpKind;
use crate::data::augment::Geometry;
use crate::data::clipset::{load_manifest, write_clipset, write_manifest};
use crate::data::pgm::{export_pgm, export_ppm};
use crate::data::sampler::center_indices;
use crate::data::synth::{gen_clip, SynthConfig};
use crate::data::{stack, VideoClip};
use crate::engine::checkpoint::Checkpoint;
use crate::engine::checks::{end_to_end_check, op_checks};
use crate::engine::config::RunConfig;
use crate::engine::eval::{evaluate, EvalReport, Protocol};
use crate::engine::train::{train, TrainOutcome};
use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckConfig, GradCheckReport};
use crate::network::{forward_with_msd, has_msd, strip_msd, ModelConfig};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const VAL_MANIFEST: &str = "val.tsv";

/// Validation clips come from a seed no training run uses.
pub fn val_seed(seed: u64) -> u64 {
    seed ^ 0xdead_beef
}

/// Generator settings of one split.
pub fn synth_config(cfg: &RunConfig, val: bool) -> SynthConfig {
    let g = &cfg.gen;
    let (n, seed) = if val {
        (g.val_clips, val_seed(cfg.seed))
    } else {
        (g.train_clips, cfg.seed)
    };
    SynthConfig {
        texture: g.texture,
        radius: g.radius,
        ..SynthConfig::new(n, g.classes, g.length, g.height, g.width, seed)
    }
}

/// Write `train/` and `val/` clip files plus one manifest per split.
/// Refuses to touch an existing data set unless `force` is set.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<(usize, usize)> {
    let dir = &cfg.data_dir;
    for m in [TRAIN_MANIFEST, VAL_MANIFEST] {
        if dir.join(m).exists() && !force {
            return Err(Error::config(format!(
                "{} already exists; pass --force to overwrite",
                dir.join(m).display()
            )));
        }
    }
    let mut counts = [0; 2];
    for (i, (split, manifest)) in [("train", TRAIN_MANIFEST), ("val", VAL_MANIFEST)].into_iter().enumerate() {
        let sc = synth_config(cfg, i == 1);
        sc.validate()?;
        fs::create_dir_all(dir.join(split))?;
        let mut entries = Vec::with_capacity(sc.num_clips);
        for k in 0..sc.num_clips {
            let clip = gen_clip(&sc, k)?;
            let rel = PathBuf::from(split).join(format!("clip_{k:04}.clps"));
            write_clipset(&dir.join(&rel), std::slice::from_ref(&clip))?;
            entries.push((rel, clip.label));
        }
        write_manifest(&dir.join(manifest), &entries)?;
        counts[i] = sc.num_clips;
    }
    Ok((counts[0], counts[1]))
}

pub fn load_split(cfg: &RunConfig, val: bool) -> Result<Vec<VideoClip>> {
    let path = cfg.data_dir.join(if val { VAL_MANIFEST } else { TRAIN_MANIFEST });
    if !path.exists() {
        return Err(Error::config(format!("{} not found; run gen-data first", path.display())));
    }
    load_manifest(&path)
}

/// Files written by [`train_run`].
pub struct TrainFiles {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub epochs: PathBuf,
    pub final_ckpt: PathBuf,
    pub best_ckpt: PathBuf,
}

impl TrainFiles {
    pub fn in_dir(dir: &Path) -> Self {
        TrainFiles {
            config: dir.join("config.txt"),
            metrics: dir.join("metrics.tsv"),
            epochs: dir.join("epochs.tsv"),
            final_ckpt: dir.join("final.ckpt"),
            best_ckpt: dir.join("best.ckpt"),
        }
    }
}

/// Train on the generated data and write the resolved config, logs and
/// checkpoints to the output directory. Without validation the best
/// checkpoint is the final one.
pub fn train_run(cfg: &RunConfig) -> Result<(TrainOutcome, TrainFiles)> {
    cfg.validate()?;
    let train_set = load_split(cfg, false)?;
    let val_set = load_split(cfg, true)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let files = TrainFiles::in_dir(&cfg.out_dir);
    fs::write(&files.config, cfg.to_text())?;
    let mut metrics = BufWriter::new(File::create(&files.metrics)?);
    let mut epochs = BufWriter::new(File::create(&files.epochs)?);
    let outcome = train(cfg, &train_set, &val_set, &mut metrics, &mut epochs)?;
    metrics.flush()?;
    epochs.flush()?;
    let save = |params: &Parameters<f32>, path: &Path| {
        Checkpoint {
            model: cfg.model.clone(),
            params: params.clone(),
        }
        .save(path)
    };
    save(&outcome.params, &files.final_ckpt)?;
    save(outcome.best.as_ref().map_or(&outcome.params, |b| &b.2), &files.best_ckpt)?;
    Ok((outcome, files))
}

pub fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("no checkpoint given (--checkpoint or `checkpoint = ...`)"))?;
    let ck = Checkpoint::load(path)?;
    ck.check_against(&cfg.model)?;
    Ok(ck)
}

pub fn protocol(cfg: &RunConfig) -> Protocol {
    Protocol {
        crops: cfg.eval.crops,
        clips: cfg.eval.clips,
        size: cfg.eval_size(),
        seed: cfg.seed,
    }
}

/// Full inference protocol on the validation split, decoders stripped.
pub fn eval_run(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let ck = load_checkpoint(cfg)?;
    let videos = load_split(cfg, true)?;
    evaluate(&strip_msd(&ck.params), &ck.model, &videos, &protocol(cfg))
}

/// Every op and block check, then the end-to-end model.
pub fn gradcheck_run(fault: Option<OpKind>) -> Result<Vec<GradCheckReport>> {
    let ops = GradCheckConfig {
        fault,
        ..Default::default()
    };
    let mut reports = op_checks(&ops)?;
    reports.push(end_to_end_check(&GradCheckConfig {
        fault,
        ..GradCheckConfig::end_to_end()
    })?);
    Ok(reports)
}

/// Entry `k` of the leading axis of a `(T, C, H, W)` stack.
fn frame(x: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let per = x.numel() / x.dim(0);
    Tensor::new(&x.shape()[1..], x.data()[k * per..(k + 1) * per].to_vec())
}

/// File name of one exported image: `frameTT_KIND.EXT`.
pub fn mask_file_name(t: usize, kind: &str) -> String {
    let ext = if kind == "rgb" { "ppm" } else { "pgm" };
    format!("frame{t:02}_{kind}.{ext}")
}

/// Centre view of validation clip `index` with its depth target, local
/// mask and global mask, four files per sampled frame.
pub fn export_masks(cfg: &RunConfig, index: usize, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let ck = load_checkpoint(cfg)?;
    if !has_msd(&ck.params) {
        return Err(Error::config(
            "checkpoint has no decoder tensors; export-masks needs a checkpoint saved with the multi-scale decoder attached",
        ));
    }
    let videos = load_split(cfg, true)?;
    let video = videos
        .get(index)
        .ok_or_else(|| Error::config(format!("clip {index} out of range ({} validation clips)", videos.len())))?;
    let model = ModelConfig {
        msd_enabled: true,
        ..ck.model.clone()
    };
    let (s, t) = (model.input_size, model.segments);
    let (rgb, depth) = video.gather(&center_indices(video.len(), t));
    let g = Geometry::center(s);
    let (rgb, depth) = (g.apply(&rgb)?, g.apply(&depth)?);
    let (_, masks) = forward_with_msd(&ck.params, &model, &stack(std::slice::from_ref(&rgb), &[1])?)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::with_capacity(4 * t);
    for k in 0..t {
        let items = [
            ("rgb", frame(&rgb, k)?),
            ("depth", frame(&depth, k)?),
            ("local", frame(&masks.local, k)?),
            ("global", frame(&masks.global, k)?),
        ];
        for (kind, img) in items {
            let path = out.join(mask_file_name(k, kind));
            if kind == "rgb" {
                export_ppm(&img, &path)?;
            } else {
                export_pgm(&img, &path)?;
            }
            written.push(path);
        }
    }
    Ok(written)
}
