//! Finite-difference checks over every differentiable op, the composite
//! blocks, and a small end-to-end model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::action::{action_forward, ce_forward, me_forward, motion_diff, ste_forward, temporal_shift, ActionConfig};
use crate::autograd::ChannelShift;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::loss::{combine, LossWeights};
use crate::network::{forward, global_decode, local_decode, LocalTap, ModelConfig};
use crate::params::{Bound, Parameters};
use crate::tensor::{ConvSpec, Tensor};

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Uniform values with magnitude at least 0.1, away from the ReLU kink.
fn away(shape: &[usize], seed: u64) -> Tensor<f64> {
    rnd(shape, seed).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// Shuffled, well separated values so no max-pool window has near ties.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::new(shape, v).expect("length matches shape")
}

/// One check per differentiable op and per composite block.
pub fn op_checks(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let pair = [rnd(&[2, 3, 4], 1), rnd(&[2, 3, 4], 2)];
    out.push(grad_check("add", |_, v| v[0].add(&v[1]), &pair, cfg)?);
    out.push(grad_check("sub", |_, v| v[0].sub(&v[1]), &pair, cfg)?);
    out.push(grad_check("mul", |_, v| v[0].mul(&v[1]), &pair, cfg)?);
    out.push(grad_check(
        "mul_broadcast",
        |_, v| v[0].mul_broadcast(&v[1]),
        &[rnd(&[2, 3, 4, 5], 3), rnd(&[2, 1, 4, 1], 4)],
        cfg,
    )?);
    out.push(grad_check("scale", |_, v| Ok(v[0].scale(2.5)), &[rnd(&[7], 5)], cfg)?);
    out.push(grad_check("relu", |_, v| Ok(v[0].relu()), &[away(&[3, 5], 6)], cfg)?);
    out.push(grad_check("sigmoid", |_, v| Ok(v[0].sigmoid().scale(3.0)), &[rnd(&[3, 5], 7).map(|x| 4.0 * x)], cfg)?);
    out.push(grad_check("reshape", |_, v| v[0].reshape(&[4, 6])?.sigmoid().reshape(&[24]), &[rnd(&[2, 3, 4], 8)], cfg)?);
    out.push(grad_check("permute", |_, v| v[0].permute(&[2, 0, 1]), &[rnd(&[2, 3, 4], 9)], cfg)?);

    let conv_in = [rnd(&[2, 3, 7, 6], 10), rnd(&[4, 3, 3, 3], 11), rnd(&[4], 12)];
    for (name, spec) in [
        ("conv2d 3x3/1", ConvSpec::new(3, 4, 3, 1, 1)),
        ("conv2d 3x3/2", ConvSpec::new(3, 4, 3, 2, 1)),
    ] {
        out.push(grad_check(name, move |_, v| v[0].conv2d(&v[1], Some(&v[2]), &spec), &conv_in, cfg)?);
    }
    out.push(grad_check(
        "conv2d 1x1",
        |_, v| v[0].conv2d(&v[1], Some(&v[2]), &ConvSpec::new(3, 4, 1, 1, 0)),
        &[rnd(&[2, 3, 4, 5], 13), rnd(&[4, 3, 1, 1], 14), rnd(&[4], 15)],
        cfg,
    )?);
    out.push(grad_check(
        "conv2d 7x7/2",
        |_, v| v[0].conv2d(&v[1], Some(&v[2]), &ConvSpec::new(3, 2, 7, 2, 3)),
        &[rnd(&[1, 3, 9, 8], 16), rnd(&[2, 3, 7, 7], 17), rnd(&[2], 18)],
        cfg,
    )?);
    out.push(grad_check(
        "conv_transpose2d",
        |_, v| v[0].conv_transpose2d(&v[1], Some(&v[2]), &ConvSpec::upsample2x(3, 2)),
        &[rnd(&[2, 3, 3, 4], 19), rnd(&[3, 2, 4, 4], 20), rnd(&[2], 21)],
        cfg,
    )?);
    out.push(grad_check(
        "conv1d_temporal",
        |_, v| v[0].conv1d_temporal(&v[1], Some(&v[2])),
        &[rnd(&[2, 4, 5], 22), rnd(&[3, 4, 3], 23), rnd(&[3], 24)],
        cfg,
    )?);
    out.push(grad_check(
        "conv3d",
        |_, v| v[0].conv3d(&v[1], &v[2]),
        &[rnd(&[2, 1, 3, 4, 5], 25), rnd(&[1, 1, 3, 3, 3], 26), rnd(&[1], 27)],
        cfg,
    )?);
    out.push(grad_check("max_pool2x2", |_, v| v[0].max_pool2x2(), &[distinct(&[2, 2, 4, 6], 28)], cfg)?);
    out.push(grad_check("avg_pool_spatial", |_, v| v[0].avg_pool_spatial(), &[rnd(&[2, 3, 4, 5], 29)], cfg)?);
    out.push(grad_check("avg_pool_channel", |_, v| v[0].avg_pool_channel(), &[rnd(&[2, 3, 4, 2, 3], 30)], cfg)?);
    out.push(grad_check("mean_axis", |_, v| v[0].mean_axis(1), &[rnd(&[2, 3, 4], 31)], cfg)?);
    out.push(grad_check("bilinear up", |_, v| v[0].bilinear_resize(7, 9), &[rnd(&[2, 1, 4, 5], 32)], cfg)?);
    out.push(grad_check("bilinear down", |_, v| v[0].bilinear_resize(2, 3), &[rnd(&[2, 1, 8, 12], 33)], cfg)?);
    out.push(grad_check("softmax", |_, v| v[0].softmax(1), &[rnd(&[3, 4, 2], 34)], cfg)?);
    out.push(grad_check(
        "fully_connected",
        |_, v| v[0].fully_connected(&v[1], Some(&v[2])),
        &[rnd(&[3, 5], 35), rnd(&[4, 5], 36), rnd(&[4], 37)],
        cfg,
    )?);
    out.push(grad_check(
        "temporal_shift op",
        |_, v| {
            v[0].shift_time(&[
                ChannelShift { lo: 0, hi: 1, offset: 1 },
                ChannelShift { lo: 1, hi: 3, offset: -2 },
            ])
        },
        &[rnd(&[2, 4, 4, 2, 2], 38)],
        cfg,
    )?);
    out.push(grad_check("cross_entropy", |_, v| v[0].cross_entropy(&[2, 0, 3]), &[rnd(&[3, 4], 39)], cfg)?);
    out.push(grad_check("mse", |_, v| v[0].mse(&v[1]), &[rnd(&[2, 1, 3, 3], 40), rnd(&[2, 1, 3, 3], 41)], cfg)?);
    out.push(grad_check("sum", |_, v| Ok(v[0].sum()), &[rnd(&[3, 4], 42)], cfg)?);

    out.extend(block_checks(cfg)?);
    Ok(out)
}

fn action_params(c: usize, t: usize, r: usize, seed: u64) -> (ActionConfig, Parameters<f64>) {
    let a = ActionConfig {
        reduce_ratio: r,
        ..ActionConfig::new(c, t)
    };
    let specs = a.param_specs("");
    let mut p = Parameters::<f64>::new();
    let mut s = seed;
    for spec in specs {
        s += 1;
        p.insert(&spec.name, rnd(&spec.shape, s).map(|v| 0.5 * v)).expect("names are unique");
    }
    (a, p)
}

fn with_params(x: Tensor<f64>, p: &Parameters<f64>) -> (Vec<Tensor<f64>>, Vec<String>) {
    let mut inputs = vec![x];
    inputs.extend(p.entries().iter().map(|e| e.value.clone()));
    (inputs, p.names().map(str::to_string).collect())
}

fn bound<'t>(names: &[String], vars: &[crate::Var<'t, f64>]) -> Result<Bound<'t, f64>> {
    let n: Vec<&str> = names.iter().map(String::as_str).collect();
    Bound::from_vars(&n, vars.to_vec())
}

fn block_checks(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let x = rnd(&[1, 2, 16, 4, 4], 50);
    out.push(grad_check("temporal_shift", |_, v| temporal_shift(&v[0], 0.125), std::slice::from_ref(&x), cfg)?);

    let (a, p) = action_params(16, 2, 4, 60);
    let (inputs, names) = with_params(x.clone(), &p);
    out.push(grad_check(
        "ste",
        |_, v| ste_forward(&v[0], &bound(&names, &v[1..])?.scope("")),
        &inputs,
        cfg,
    )?);
    out.push(grad_check(
        "ce",
        |_, v| ce_forward(&v[0], &bound(&names, &v[1..])?.scope("")),
        &inputs,
        cfg,
    )?);
    out.push(grad_check(
        "motion_diff",
        |_, v| motion_diff(&v[0], &v[1], Some(&v[2])),
        &[rnd(&[1, 3, 4, 5, 5], 70), rnd(&[4, 4, 3, 3], 71), rnd(&[4], 72)],
        cfg,
    )?);
    out.push(grad_check(
        "me",
        |_, v| me_forward(&v[0], &bound(&names, &v[1..])?.scope("")),
        &inputs,
        cfg,
    )?);
    out.push(grad_check(
        "action",
        |_, v| action_forward(&v[0], &bound(&names, &v[1..])?.scope(""), &a, None),
        &inputs,
        cfg,
    )?);

    let dec = ModelConfig {
        stem_width: 8,
        widths: vec![8, 16, 32, 16],
        ..ModelConfig::default()
    };
    let mut dp = Parameters::<f64>::new();
    for (i, spec) in dec.decoder_specs().into_iter().enumerate() {
        dp.insert(&spec.name, rnd(&spec.shape, 80 + i as u64).map(|v| 0.5 * v))?;
    }
    let (inputs, names) = with_params(rnd(&[2, 8, 3, 3], 90), &dp);
    out.push(grad_check("local_decode", |_, v| local_decode(&bound(&names, &v[1..])?, &v[0]), &inputs, cfg)?);
    let (inputs, names) = with_params(rnd(&[2, 16, 2, 2], 91), &dp);
    out.push(grad_check("global_decode", |_, v| global_decode(&bound(&names, &v[1..])?, &v[0]), &inputs, cfg)?);
    Ok(out)
}

/// The reduced model used by the end-to-end check: widths 8/16/32/64,
/// input 32, two segments, decoders on.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        segments: 2,
        num_classes: 3,
        stem_width: 8,
        widths: vec![8, 16, 32, 64],
        blocks: vec![1, 1, 1, 1],
        input_size: 32,
        reduce_ratio: 8,
        shift_fraction: 0.125,
        loss: LossWeights::default(),
        msd_enabled: true,
        local_tap: LocalTap::Stage1,
        zero_init_residual: false,
    }
}

/// Full multi-task loss of the toy model with respect to the input clip and
/// every parameter tensor.
pub fn end_to_end_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = toy_model();
    // Zero biases put ReLU inputs exactly on the kink wherever a branch is
    // inactive, so every tensor starts from a generic random point instead.
    let mut params = Parameters::<f64>::from_specs(&model.param_specs(), cfg.seed)?;
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        let jitter = rnd(e.value.shape(), 1000 + i as u64);
        e.value = Tensor::new(
            e.value.shape(),
            e.value.data().iter().zip(jitter.data()).map(|(v, j)| v + 0.1 * j).collect(),
        )?;
    }
    let s = model.input_size;
    let clip = rnd(&[1, model.segments, 3, s, s], 100).map(|v| 0.5 + 0.5 * v);
    let local_t = rnd(&[model.segments, 1, s, s], 101).map(|v| v.abs());
    let global_t = rnd(&[model.segments, 1, s / 4, s / 4], 102).map(|v| v.abs());
    let (inputs, names) = with_params(clip, &params);
    grad_check(
        "end_to_end",
        |tape, v| {
            let b = bound(&names, &v[1..])?;
            let out = forward(&b, &model, &v[0], true)?;
            let l_cls = out.logits.cross_entropy(&[1])?;
            let lm = out.local_mask.expect("decoders requested");
            let gm = out.global_mask.expect("decoders requested");
            let l_local = lm.mse(&tape.constant(local_t.clone()))?;
            let l_global = gm.mse(&tape.constant(global_t.clone()))?;
            Ok(combine(l_cls, Some(l_local), Some(l_global), &model.loss)?.total)
        },
        &inputs,
        cfg,
    )
}
