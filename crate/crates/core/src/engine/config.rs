//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Lines starting with `#` and blank lines are ignored. Later assignments
//! win, so command-line overrides are applied with [`RunConfig::set`] after
//! the file is read.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::augment::AugmentConfig;
use crate::data::sampler::{SamplerConfig, SamplerMode};
use crate::error::{Error, Result};
use crate::network::{LocalTap, ModelConfig};
use crate::optim::OptimConfig;

/// Parameters of the `gen-data` command.
#[derive(Clone, Debug, PartialEq)]
pub struct DataGenConfig {
    pub train_clips: usize,
    pub val_clips: usize,
    pub classes: usize,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub texture: f32,
    pub radius: f32,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            train_clips: 64,
            val_clips: 32,
            classes: 4,
            length: 16,
            height: 72,
            width: 96,
            texture: 0.3,
            radius: 0.12,
        }
    }
}

/// Inference protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub crops: usize,
    pub clips: usize,
    /// Shorter side before cropping; `None` means `input_size * 8 / 7`.
    pub size: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            crops: 3,
            clips: 10,
            size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub gen: DataGenConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Validate every this many epochs; 0 disables per-epoch validation.
    pub val_every: usize,
    pub binarize_threshold: Option<u8>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            input_size: 64,
            ..ModelConfig::default()
        };
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            sampler: SamplerConfig::uniform(model.segments),
            model,
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
            gen: DataGenConfig::default(),
            epochs: 30,
            batch_size: 8,
            val_every: 1,
            binarize_threshold: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::config(format!("{key}: expected on/off, got {other:?}"))),
    }
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "out.dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "model.t" => {
                self.model.segments = parse(key, v)?;
                self.sampler.segments = self.model.segments;
            }
            "model.classes" => self.model.num_classes = parse(key, v)?,
            "model.stem_width" => self.model.stem_width = parse(key, v)?,
            "model.widths" => self.model.widths = parse_list(key, v)?,
            "model.blocks" => self.model.blocks = parse_list(key, v)?,
            "model.input" => self.model.input_size = parse(key, v)?,
            "model.reduce_ratio" => self.model.reduce_ratio = parse(key, v)?,
            "model.shift_fraction" => self.model.shift_fraction = parse(key, v)?,
            "model.msd" => self.model.msd_enabled = parse_bool(key, v)?,
            "model.local_tap" => {
                self.model.local_tap = LocalTap::parse(v).ok_or_else(|| Error::config(format!("{key}: expected stem or stage1")))?
            }
            "model.zero_init_residual" => self.model.zero_init_residual = parse_bool(key, v)?,
            "loss.cls" => self.model.loss.cls = parse(key, v)?,
            "loss.local" => self.model.loss.local = parse(key, v)?,
            "loss.global" => self.model.loss.global = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.momentum" => self.optim.momentum = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.milestones" => self.optim.milestones = parse_list(key, v)?,
            "optim.decay" => self.optim.decay = parse(key, v)?,
            "optim.clip_norm" => self.optim.clip_norm = (v != "off").then(|| parse(key, v)).transpose()?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch" => self.batch_size = parse(key, v)?,
            "train.val_every" => self.val_every = parse(key, v)?,
            "sampler.mode" => {
                self.sampler.mode =
                    SamplerMode::parse(v).ok_or_else(|| Error::config(format!("{key}: expected uniform or dense")))?
            }
            "sampler.stride" => self.sampler.stride = parse(key, v)?,
            "augment.scales" => self.augment.scales = parse_list(key, v)?,
            "augment.jitter_prob" => self.augment.jitter_prob = parse(key, v)?,
            "augment.brightness" => self.augment.brightness = parse(key, v)?,
            "augment.contrast" => self.augment.contrast = parse(key, v)?,
            "augment.saturation" => self.augment.saturation = parse(key, v)?,
            "augment.hue" => self.augment.hue = parse(key, v)?,
            "depth.binarize_threshold" => {
                self.binarize_threshold = match v {
                    "" | "off" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "eval.crops" => self.eval.crops = parse(key, v)?,
            "eval.clips" => self.eval.clips = parse(key, v)?,
            "eval.size" => self.eval.size = (v != "auto").then(|| parse(key, v)).transpose()?,
            "gen.train" => self.gen.train_clips = parse(key, v)?,
            "gen.val" => self.gen.val_clips = parse(key, v)?,
            "gen.classes" => self.gen.classes = parse(key, v)?,
            "gen.length" => self.gen.length = parse(key, v)?,
            "gen.height" => self.gen.height = parse(key, v)?,
            "gen.width" => self.gen.width = parse(key, v)?,
            "gen.texture" => self.gen.texture = parse(key, v)?,
            "gen.radius" => self.gen.radius = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.sampler.validate()?;
        self.augment.validate()?;
        if self.sampler.segments != self.model.segments {
            return Err(Error::config("sampler and model disagree on the number of segments"));
        }
        if self.batch_size == 0 || self.eval.crops == 0 || self.eval.clips == 0 {
            return Err(Error::config("batch size, eval crops and eval clips must be >= 1"));
        }
        if self.eval_size() < self.model.input_size {
            return Err(Error::config("eval size must not be below the input size"));
        }
        Ok(())
    }

    pub fn eval_size(&self) -> usize {
        self.eval
            .size
            .unwrap_or_else(|| (self.model.input_size * 8 + 3) / 7)
    }

    /// Architecture keys only, in canonical form.
    pub fn model_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "model.t = {}", m.segments);
        let _ = writeln!(s, "model.classes = {}", m.num_classes);
        let _ = writeln!(s, "model.stem_width = {}", m.stem_width);
        let _ = writeln!(s, "model.widths = {}", list(&m.widths));
        let _ = writeln!(s, "model.blocks = {}", list(&m.blocks));
        let _ = writeln!(s, "model.input = {}", m.input_size);
        let _ = writeln!(s, "model.reduce_ratio = {}", m.reduce_ratio);
        let _ = writeln!(s, "model.shift_fraction = {}", m.shift_fraction);
        let _ = writeln!(s, "model.msd = {}", on_off(m.msd_enabled));
        let _ = writeln!(s, "model.local_tap = {}", m.local_tap.name());
        let _ = writeln!(s, "model.zero_init_residual = {}", on_off(m.zero_init_residual));
        let _ = writeln!(s, "loss.cls = {}", m.loss.cls);
        let _ = writeln!(s, "loss.local = {}", m.loss.local);
        let _ = writeln!(s, "loss.global = {}", m.loss.global);
        s
    }

    /// Every key in canonical form; `apply_text` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = format!("seed = {}\n", self.seed);
        let _ = writeln!(s, "data.dir = {}", self.data_dir.display());
        let _ = writeln!(s, "out.dir = {}", self.out_dir.display());
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", c.display());
        }
        s += &self.model_text();
        let o = &self.optim;
        let _ = writeln!(s, "optim.lr = {}", o.lr);
        let _ = writeln!(s, "optim.momentum = {}", o.momentum);
        let _ = writeln!(s, "optim.weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "optim.milestones = {}", list(&o.milestones));
        let _ = writeln!(s, "optim.decay = {}", o.decay);
        let clip = o.clip_norm.map_or("off".to_string(), |c| c.to_string());
        let _ = writeln!(s, "optim.clip_norm = {clip}");
        let _ = writeln!(s, "train.epochs = {}", self.epochs);
        let _ = writeln!(s, "train.batch = {}", self.batch_size);
        let _ = writeln!(s, "train.val_every = {}", self.val_every);
        let _ = writeln!(s, "sampler.mode = {}", self.sampler.mode.name());
        let _ = writeln!(s, "sampler.stride = {}", self.sampler.stride);
        let a = &self.augment;
        let _ = writeln!(s, "augment.scales = {}", list(&a.scales));
        let _ = writeln!(s, "augment.jitter_prob = {}", a.jitter_prob);
        let _ = writeln!(s, "augment.brightness = {}", a.brightness);
        let _ = writeln!(s, "augment.contrast = {}", a.contrast);
        let _ = writeln!(s, "augment.saturation = {}", a.saturation);
        let _ = writeln!(s, "augment.hue = {}", a.hue);
        let thr = self.binarize_threshold.map_or("off".to_string(), |t| t.to_string());
        let _ = writeln!(s, "depth.binarize_threshold = {thr}");
        let _ = writeln!(s, "eval.crops = {}", self.eval.crops);
        let _ = writeln!(s, "eval.clips = {}", self.eval.clips);
        let size = self.eval.size.map_or("auto".to_string(), |v| v.to_string());
        let _ = writeln!(s, "eval.size = {size}");
        let g = &self.gen;
        let _ = writeln!(s, "gen.train = {}", g.train_clips);
        let _ = writeln!(s, "gen.val = {}", g.val_clips);
        let _ = writeln!(s, "gen.classes = {}", g.classes);
        let _ = writeln!(s, "gen.length = {}", g.length);
        let _ = writeln!(s, "gen.height = {}", g.height);
        let _ = writeln!(s, "gen.width = {}", g.width);
        let _ = writeln!(s, "gen.texture = {}", g.texture);
        let _ = writeln!(s, "gen.radius = {}", g.radius);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("model.widths", "8,16,32,64").unwrap();
        cfg.set("depth.binarize_threshold", "10").unwrap();
        cfg.set("checkpoint", "runs/final.ckpt").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\n\nmodel.t = 4\n").unwrap();
        assert_eq!((cfg.model.segments, cfg.sampler.segments), (4, 4));
        assert!(cfg.apply_text("model.t 4").is_err());
        let e = cfg.set("model.depth", "3").unwrap_err().to_string();
        assert!(e.contains("model.depth"));
        assert!(cfg.set("model.msd", "maybe").is_err());
    }

    #[test]
    fn eval_size_scales_with_input() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.eval_size(), 73);
        cfg.set("model.input", "224").unwrap();
        assert_eq!(cfg.eval_size(), 256);
        assert!(cfg.validate().is_ok());
    }
}
