//! Residual backbone with ACTION blocks, the classification head, and the
//! detachable multi-scale decoder (MSD).
//!
//! Topology, for input `S`:
//!
//! ```text
//! stem: 7x7/2 conv + ReLU, 2x2/2 max pool            -> S/4
//! stage 1..4: bottleneck blocks, first block of stages 2-4 strided
//!             -> S/4, S/8, S/16, S/32
//! head: spatial mean, fully connected, mean over T    -> (N, CLS)
//! local decoder:  stage-1 output, two 4x4/2 transposed convs  -> S
//! global decoder: stage-4 output, three 4x4/2 transposed convs -> S/4
//! ```
//!
//! Every residual block runs an ACTION block on its residual branch input.
//! Decoders only read backbone features, so removing them leaves the
//! classification path untouched.

use crate::action::{action_forward, ActionConfig};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::params::{join, Bound, Init, ParamSpec, Parameters};
use crate::tensor::{ConvSpec, Scalar, Tensor};

pub const LOCAL_DECODER: &str = "msd.local";
pub const GLOBAL_DECODER: &str = "msd.global";
const MSD_PREFIX: &str = "msd.";
const STEM_KERNEL: usize = 7;
const BOTTLENECK_EXPANSION: usize = 4;

/// Backbone feature feeding the local decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalTap {
    /// After stem convolution and pooling.
    Stem,
    /// After the first residual stage.
    Stage1,
}

impl LocalTap {
    pub fn name(self) -> &'static str {
        match self {
            LocalTap::Stem => "stem",
            LocalTap::Stage1 => "stage1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stem" => Some(LocalTap::Stem),
            "stage1" => Some(LocalTap::Stage1),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames per clip (T).
    pub segments: usize,
    pub num_classes: usize,
    pub stem_width: usize,
    /// Output channels of the four residual stages.
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub input_size: usize,
    pub reduce_ratio: usize,
    pub shift_fraction: f64,
    pub loss: LossWeights,
    pub msd_enabled: bool,
    pub local_tap: LocalTap,
    /// Initialize the last convolution of every residual branch to zero.
    pub zero_init_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            segments: 8,
            num_classes: 4,
            stem_width: 16,
            widths: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            input_size: 224,
            reduce_ratio: 16,
            shift_fraction: 0.125,
            loss: LossWeights::default(),
            msd_enabled: true,
            local_tap: LocalTap::Stage1,
            zero_init_residual: true,
        }
    }
}

/// One residual block's geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub name: String,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockPlan {
    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.blocks.len() != 4 {
            return Err(Error::config(format!(
                "expected four stages, got widths {:?} and blocks {:?}",
                self.widths, self.blocks
            )));
        }
        if self.blocks.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.segments == 0 || self.num_classes == 0 {
            return Err(Error::config("segments and num_classes must be >= 1"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::config(format!("input size {} must be a positive multiple of 32", self.input_size)));
        }
        self.loss.validate()?;
        for plan in self.block_plans() {
            self.action_config(plan.in_channels).validate().map_err(|e| {
                Error::config(format!("{}: {}", plan.name, e.to_string().trim_start_matches("configuration error: ")))
            })?;
        }
        Ok(())
    }

    pub fn action_config(&self, channels: usize) -> ActionConfig {
        ActionConfig {
            channels,
            segments: self.segments,
            reduce_ratio: self.reduce_ratio,
            shift_fraction: self.shift_fraction,
        }
    }

    pub fn block_plans(&self) -> Vec<BlockPlan> {
        let mut plans = Vec::new();
        let mut in_c = self.stem_width;
        for (stage, (&width, &count)) in self.widths.iter().zip(&self.blocks).enumerate() {
            for b in 0..count {
                plans.push(BlockPlan {
                    name: format!("stage{}.block{b}", stage + 1),
                    in_channels: in_c,
                    mid_channels: (width / BOTTLENECK_EXPANSION).max(1),
                    out_channels: width,
                    stride: if stage > 0 && b == 0 { 2 } else { 1 },
                });
                in_c = width;
            }
        }
        plans
    }

    pub fn local_tap_channels(&self) -> usize {
        match self.local_tap {
            LocalTap::Stem => self.stem_width,
            LocalTap::Stage1 => self.widths[0],
        }
    }

    /// Spatial extents after the stem and after each stage.
    pub fn stage_extents(&self, input: usize) -> Result<Vec<usize>> {
        let stem = ConvSpec::new(3, self.stem_width, STEM_KERNEL, 2, STEM_KERNEL / 2);
        let mut s = stem.output_extent(input, 0)? / 2;
        let mut out = vec![s];
        for stage in 0..4 {
            if stage > 0 {
                s = ConvSpec::new(1, 1, 3, 2, 1).output_extent(s, 0)?;
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Backbone and head tensors.
    pub fn backbone_specs(&self) -> Vec<ParamSpec> {
        let mut specs = vec![
            ParamSpec::new("stem.conv.w", &[self.stem_width, 3, STEM_KERNEL, STEM_KERNEL], Init::FanIn(3 * STEM_KERNEL * STEM_KERNEL)),
            ParamSpec::new("stem.conv.b", &[self.stem_width], Init::Zeros),
        ];
        for plan in self.block_plans() {
            let p = |n: &str| join(&plan.name, n);
            specs.extend(self.action_config(plan.in_channels).param_specs(&p("action")));
            let (i, m, o) = (plan.in_channels, plan.mid_channels, plan.out_channels);
            let last_init = if self.zero_init_residual { Init::Zeros } else { Init::FanIn(m) };
            specs.extend([
                ParamSpec::new(p("conv1.w"), &[m, i, 1, 1], Init::FanIn(i)),
                ParamSpec::new(p("conv1.b"), &[m], Init::Zeros),
                ParamSpec::new(p("conv2.w"), &[m, m, 3, 3], Init::FanIn(9 * m)),
                ParamSpec::new(p("conv2.b"), &[m], Init::Zeros),
                ParamSpec::new(p("conv3.w"), &[o, m, 1, 1], last_init),
                ParamSpec::new(p("conv3.b"), &[o], Init::Zeros),
            ]);
            if plan.has_projection() {
                specs.extend([
                    ParamSpec::new(p("proj.w"), &[o, i, 1, 1], Init::FanIn(i)),
                    ParamSpec::new(p("proj.b"), &[o], Init::Zeros),
                ]);
            }
        }
        let c4 = self.widths[3];
        specs.push(ParamSpec::new("head.fc.w", &[self.num_classes, c4], Init::FanIn(c4)));
        specs.push(ParamSpec::new("head.fc.b", &[self.num_classes], Init::Zeros));
        specs
    }

    /// Channel chain of the local and global decoders.
    pub fn decoder_channels(&self) -> (Vec<usize>, Vec<usize>) {
        let ct = self.local_tap_channels();
        let c4 = self.widths[3];
        (
            vec![ct, (ct / 2).max(1), 1],
            vec![c4, (c4 / 2).max(1), (c4 / 4).max(1), 1],
        )
    }

    pub fn decoder_specs(&self) -> Vec<ParamSpec> {
        let (local, global) = self.decoder_channels();
        let mut specs = Vec::new();
        for (prefix, chain) in [(LOCAL_DECODER, local), (GLOBAL_DECODER, global)] {
            let last = chain.len() - 2;
            for (l, pair) in chain.windows(2).enumerate() {
                let (i, o) = (pair[0], pair[1]);
                // a zero output layer starts every mask at 0 instead of noise
                let init = if l == last { Init::Zeros } else { Init::FanIn(i * 4) };
                specs.push(ParamSpec::new(format!("{prefix}.up{l}.w"), &[i, o, 4, 4], init));
                specs.push(ParamSpec::new(format!("{prefix}.up{l}.b"), &[o], Init::Zeros));
            }
        }
        specs
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.backbone_specs();
        if self.msd_enabled {
            specs.extend(self.decoder_specs());
        }
        specs
    }

    /// Fields that determine the backbone, ignoring loss weights and decoder presence.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.segments == other.segments
            && self.num_classes == other.num_classes
            && self.stem_width == other.stem_width
            && self.widths == other.widths
            && self.blocks == other.blocks
            && self.input_size == other.input_size
            && self.reduce_ratio == other.reduce_ratio
            && self.shift_fraction == other.shift_fraction
            && self.local_tap == other.local_tap
    }
}

/// Scalar count of the backbone and head, computed layer by layer.
pub fn backbone_parameter_count(cfg: &ModelConfig) -> usize {
    let sw = cfg.stem_width;
    let mut n = sw * 3 * STEM_KERNEL * STEM_KERNEL + sw;
    for plan in cfg.block_plans() {
        let (i, m, o) = (plan.in_channels, plan.mid_channels, plan.out_channels);
        let cr = cfg.action_config(i).reduced();
        // STE 3x3x3 kernel, CE squeeze/temporal/expand, ME squeeze/3x3/expand
        n += 27 + 1;
        n += (cr * i + cr) + (cr * cr * 3 + cr) + (i * cr + i);
        n += (cr * i + cr) + (cr * cr * 9 + cr) + (i * cr + i);
        n += (m * i + m) + (m * m * 9 + m) + (o * m + o);
        if plan.has_projection() {
            n += o * i + o;
        }
    }
    n + cfg.num_classes * cfg.widths[3] + cfg.num_classes
}

/// Scalar count of both decoders.
pub fn decoder_parameter_count(cfg: &ModelConfig) -> usize {
    let (local, global) = cfg.decoder_channels();
    local
        .windows(2)
        .chain(global.windows(2))
        .map(|p| p[0] * p[1] * 16 + p[1])
        .sum()
}

/// Deterministic initialization for `cfg` under `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Parameters<f32>> {
    cfg.validate()?;
    Parameters::from_specs(&cfg.param_specs(), seed)
}

/// Remove decoder tensors. Idempotent.
pub fn strip_msd<F: Scalar>(params: &Parameters<F>) -> Parameters<F> {
    let mut p = params.clone();
    p.retain(|n| !n.starts_with(MSD_PREFIX));
    p
}

pub fn has_msd<F: Scalar>(params: &Parameters<F>) -> bool {
    params.names().any(|n| n.starts_with(MSD_PREFIX))
}

/// Predicted masks, each `(N*T, 1, h, w)`.
#[derive(Clone, Debug)]
pub struct MaskPair<F = f32> {
    pub local: Tensor<F>,
    pub global: Tensor<F>,
}

/// Tape-level outputs of one forward pass.
pub struct Outputs<'t, F: Scalar> {
    pub logits: Var<'t, F>,
    pub local_mask: Option<Var<'t, F>>,
    pub global_mask: Option<Var<'t, F>>,
}

fn conv<'t, F: Scalar>(b: &Bound<'t, F>, name: &str, x: &Var<'t, F>, stride: usize, pad: usize) -> Result<Var<'t, F>> {
    let w = b.get(&join(name, "w"))?;
    let ws = w.shape();
    let spec = ConvSpec::new(ws[1], ws[0], ws[2], stride, pad);
    x.conv2d(&w, Some(&b.get(&join(name, "b"))?), &spec)
}

fn residual_block<'t, F: Scalar>(b: &Bound<'t, F>, cfg: &ModelConfig, plan: &BlockPlan, x: &Var<'t, F>, n: usize) -> Result<Var<'t, F>> {
    let s = x.shape();
    let (nt, c, h, w) = (s[0], s[1], s[2], s[3]);
    let t = nt / n;
    let excited = action_forward(
        &x.reshape(&[n, t, c, h, w])?,
        &b.scope(&join(&plan.name, "action")),
        &cfg.action_config(plan.in_channels),
        None,
    )?
    .reshape(&[nt, c, h, w])?;
    let branch = conv(b, &join(&plan.name, "conv1"), &excited, 1, 0)?.relu();
    let branch = conv(b, &join(&plan.name, "conv2"), &branch, plan.stride, 1)?.relu();
    let branch = conv(b, &join(&plan.name, "conv3"), &branch, 1, 0)?;
    let shortcut = if plan.has_projection() {
        conv(b, &join(&plan.name, "proj"), x, plan.stride, 0)?
    } else {
        *x
    };
    Ok(branch.add(&shortcut)?.relu())
}

fn decode<'t, F: Scalar>(b: &Bound<'t, F>, prefix: &str, layers: usize, feat: &Var<'t, F>) -> Result<Var<'t, F>> {
    let mut h = *feat;
    for l in 0..layers {
        let w = b.get(&format!("{prefix}.up{l}.w"))?;
        let ws = w.shape();
        let spec = ConvSpec::upsample2x(ws[0], ws[1]);
        h = h.conv_transpose2d(&w, Some(&b.get(&format!("{prefix}.up{l}.b"))?), &spec)?;
        if l + 1 < layers {
            h = h.relu();
        }
    }
    Ok(h)
}

/// Local decoder: `(N*T, C, S/4, S/4)` -> `(N*T, 1, S, S)`.
pub fn local_decode<'t, F: Scalar>(b: &Bound<'t, F>, feat: &Var<'t, F>) -> Result<Var<'t, F>> {
    decode(b, LOCAL_DECODER, 2, feat)
}

/// Global decoder: `(N*T, C, S/32, S/32)` -> `(N*T, 1, S/4, S/4)`.
pub fn global_decode<'t, F: Scalar>(b: &Bound<'t, F>, feat: &Var<'t, F>) -> Result<Var<'t, F>> {
    decode(b, GLOBAL_DECODER, 3, feat)
}

/// Record a forward pass of `clip: (N, T, 3, S, S)` on the tape.
pub fn forward<'t, F: Scalar>(b: &Bound<'t, F>, cfg: &ModelConfig, clip: &Var<'t, F>, with_msd: bool) -> Result<Outputs<'t, F>> {
    let s = clip.shape();
    if s.len() != 5 {
        return Err(Error::shape("forward", format!("clip must be (N,T,3,S,S), got {s:?}")));
    }
    let (n, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    if c != 3 {
        return Err(Error::shape("forward", format!("axis C: expected 3 colour channels, got {c}")));
    }
    if with_msd && (h != cfg.input_size || w != cfg.input_size) {
        return Err(Error::shape(
            "forward",
            format!("decoders need {0}x{0} input, got {h}x{w}", cfg.input_size),
        ));
    }
    let frames = clip.reshape(&[n * t, 3, h, w])?;
    let stem = conv(b, "stem.conv", &frames, 2, STEM_KERNEL / 2)?.relu().max_pool2x2()?;

    let mut feat = stem;
    let mut local_feat = (cfg.local_tap == LocalTap::Stem).then_some(stem);
    for plan in cfg.block_plans() {
        feat = residual_block(b, cfg, &plan, &feat, n)?;
        if local_feat.is_none() && plan.name.starts_with("stage1.") && is_last_in_stage(cfg, &plan) {
            local_feat = Some(feat);
        }
    }

    let fs = feat.shape();
    let per_frame = feat
        .avg_pool_spatial()?
        .reshape(&[n * t, fs[1]])?
        .fully_connected(&b.get("head.fc.w")?, Some(&b.get("head.fc.b")?))?;
    let logits = per_frame.reshape(&[n, t, cfg.num_classes])?.mean_axis(1)?;

    let (local_mask, global_mask) = if with_msd {
        let lf = local_feat.expect("stage 1 always runs");
        (Some(local_decode(b, &lf)?), Some(global_decode(b, &feat)?))
    } else {
        (None, None)
    };
    Ok(Outputs {
        logits,
        local_mask,
        global_mask,
    })
}

fn is_last_in_stage(cfg: &ModelConfig, plan: &BlockPlan) -> bool {
    plan.name == format!("stage1.block{}", cfg.blocks[0] - 1)
}

/// Class scores `(N, CLS)` without touching any decoder tensor.
pub fn forward_classify<F: Scalar>(params: &Parameters<F>, cfg: &ModelConfig, clip: &Tensor<F>) -> Result<Tensor<F>> {
    let tape = Tape::<F>::new();
    let b = params.bind(&tape, false);
    let x = tape.constant(clip.clone());
    Ok(forward(&b, cfg, &x, false)?.logits.value())
}

/// Class scores plus both decoder masks.
pub fn forward_with_msd<F: Scalar>(params: &Parameters<F>, cfg: &ModelConfig, clip: &Tensor<F>) -> Result<(Tensor<F>, MaskPair<F>)> {
    if !cfg.msd_enabled || !has_msd(params) {
        return Err(Error::config("multi-scale decoder is disabled or was stripped from these parameters"));
    }
    let tape = Tape::<F>::new();
    let b = params.bind(&tape, false);
    let x = tape.constant(clip.clone());
    let out = forward(&b, cfg, &x, true)?;
    let masks = MaskPair {
        local: out.local_mask.expect("msd requested").value(),
        global: out.global_mask.expect("msd requested").value(),
    };
    Ok((out.logits.value(), masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            segments: 2,
            num_classes: 3,
            stem_width: 8,
            widths: vec![8, 16, 32, 64],
            blocks: vec![1, 1, 1, 1],
            input_size: 32,
            reduce_ratio: 4,
            ..Default::default()
        }
    }

    #[test]
    fn validation_catches_bad_configs() {
        assert!(tiny().validate().is_ok());
        assert!(ModelConfig { input_size: 48, ..tiny() }.validate().is_err());
        assert!(ModelConfig { reduce_ratio: 16, ..tiny() }.validate().is_err());
        assert!(ModelConfig { widths: vec![8, 16, 32], ..tiny() }.validate().is_err());
    }

    #[test]
    fn stage_extents_for_224() {
        assert_eq!(ModelConfig::default().stage_extents(224).unwrap(), vec![56, 56, 28, 14, 7]);
    }

    #[test]
    fn block_plans_follow_stride_pattern() {
        let cfg = ModelConfig { blocks: vec![2, 1, 1, 1], ..tiny() };
        let strides: Vec<_> = cfg.block_plans().iter().map(|p| p.stride).collect();
        assert_eq!(strides, [1, 1, 2, 2, 2]);
        assert!(!cfg.block_plans()[0].has_projection());
        assert!(cfg.block_plans()[2].has_projection());
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny();
        let params = build_model(&cfg, 1).unwrap();
        let clip = Tensor::<f32>::full(&[2, 2, 3, 32, 32], 0.25);
        let (logits, masks) = forward_with_msd(&params, &cfg, &clip).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(masks.local.shape(), &[4, 1, 32, 32]);
        assert_eq!(masks.global.shape(), &[4, 1, 8, 8]);
    }

    #[test]
    fn closed_form_counts() {
        let cfg = tiny();
        let p = build_model(&cfg, 0).unwrap();
        assert_eq!(p.count(), backbone_parameter_count(&cfg) + decoder_parameter_count(&cfg));
        assert_eq!(strip_msd(&p).count(), backbone_parameter_count(&cfg));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let cfg = tiny();
        let params = build_model(&cfg, 1).unwrap();
        let clip = Tensor::<f32>::zeros(&[1, 2, 4, 32, 32]);
        let err = forward_classify(&params, &cfg, &clip).unwrap_err().to_string();
        assert!(err.contains("axis C"), "{err}");
    }

    #[test]
    fn msd_required_for_masks() {
        let cfg = tiny();
        let params = strip_msd(&build_model(&cfg, 1).unwrap());
        let clip = Tensor::<f32>::zeros(&[1, 2, 3, 32, 32]);
        assert!(forward_with_msd(&params, &cfg, &clip).is_err());
        let off = ModelConfig { msd_enabled: false, ..cfg };
        assert!(forward_with_msd(&build_model(&off, 1).unwrap(), &off, &clip).is_err());
    }

    #[test]
    fn local_tap_at_stem() {
        let cfg = ModelConfig { local_tap: LocalTap::Stem, ..tiny() };
        let params = build_model(&cfg, 3).unwrap();
        assert_eq!(params.get("msd.local.up0.w").unwrap().shape(), &[8, 4, 4, 4]);
        let clip = Tensor::<f32>::full(&[1, 2, 3, 32, 32], 0.5);
        let (_, masks) = forward_with_msd(&params, &cfg, &clip).unwrap();
        assert_eq!(masks.local.shape(), &[2, 1, 32, 32]);
    }
}
