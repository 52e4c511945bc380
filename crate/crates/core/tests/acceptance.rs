//! Acceptance checks, one PASS/FAIL line each. Pass criterion numbers as
//! arguments to run a subset.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use actnet::action::{excitation_maps, motion_diff, temporal_shift, ActionConfig};
use actnet::data::depth::{binarize_depth, binarize_raw};
use actnet::data::sampler::{sample_segments, SamplerConfig};
use actnet::data::synth::gen_synthetic;
use actnet::data::VideoClip;
use actnet::engine::commands::{gradcheck_run, protocol, synth_config, train_run};
use actnet::engine::config::RunConfig;
use actnet::engine::eval::{evaluate, quick_accuracy};
use actnet::engine::train::{make_batch, train};
use actnet::loss::{total_loss, LossWeights};
use actnet::network::{
    forward_classify, forward_with_msd, global_decode, local_decode, strip_msd, ModelConfig,
};
use actnet::params::Parameters;
use actnet::{ConvSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: actnet::Error) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradients() -> Result<String, String> {
    let t0 = Instant::now();
    let reports = gradcheck_run(None).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    ensure(secs < 300.0, format!("took {secs:.1}s"))?;
    let e2e = reports.last().expect("end-to-end report");
    Ok(format!(
        "{} checks, end-to-end max_rel_err={:.2e}, {secs:.1}s",
        reports.len(),
        e2e.max_rel_error
    ))
}

fn adjoint() -> Result<String, String> {
    let mut r = rng(2);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (n, c, o) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5));
        let (k, s) = (r.gen_range(1..6), r.gen_range(1..4));
        let p = r.gen_range(0..=(k - 1) / 2);
        let (oh, ow) = (r.gen_range(1..7), r.gen_range(1..7));
        let (h, w) = ((oh - 1) * s + k - 2 * p, (ow - 1) * s + k - 2 * p);
        let x = Tensor::<f64>::uniform(&[n, c, h, w], -1.0, 1.0, &mut r);
        let y = Tensor::<f64>::uniform(&[n, o, oh, ow], -1.0, 1.0, &mut r);
        let wt = Tensor::<f64>::uniform(&[o, c, k, k], -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let ax = tape
            .constant(x.clone())
            .conv2d(&tape.constant(wt.clone()), None, &ConvSpec::new(c, o, k, s, p))
            .map_err(err)?
            .value();
        let aty = tape
            .constant(y.clone())
            .conv_transpose2d(&tape.constant(wt.clone()), None, &ConvSpec::new(o, c, k, s, p))
            .map_err(err)?
            .value();
        ensure(aty.shape() == x.shape(), format!("convT shape {:?} vs {:?}", aty.shape(), x.shape()))?;
        let (lhs, rhs) = (ax.dot(&y), x.dot(&aty));
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    ensure(worst < 1e-10, format!("max relative gap {worst:.2e}"))?;
    Ok(format!("100 geometries, max relative gap {worst:.2e}"))
}

fn shape_config(widths: [usize; 4]) -> ModelConfig {
    ModelConfig {
        segments: 2,
        stem_width: widths[0],
        widths: widths.to_vec(),
        reduce_ratio: 4,
        ..ModelConfig::default()
    }
}

fn shapes() -> Result<String, String> {
    for widths in [[8, 16, 32, 64], [16, 32, 64, 128]] {
        let cfg = shape_config(widths);
        let ext = cfg.stage_extents(224).map_err(err)?;
        ensure(ext[1..] == [56, 28, 14, 7], format!("{widths:?}: stage extents {ext:?}"))?;
        let params = Parameters::<f32>::from_specs(&cfg.param_specs(), 0).map_err(err)?;
        let up = |p: &str| params.names().filter(|n| n.starts_with(p) && n.ends_with(".w")).count();
        ensure(up("msd.local.up") == 2, format!("{widths:?}: {} local layers", up("msd.local.up")))?;
        ensure(up("msd.global.up") == 3, format!("{widths:?}: {} global layers", up("msd.global.up")))?;

        let tape = Tape::new();
        let b = params.bind(&tape, false);
        let l = local_decode(&b, &tape.constant(Tensor::zeros(&[1, widths[0], 56, 56]))).map_err(err)?;
        let g = global_decode(&b, &tape.constant(Tensor::zeros(&[1, widths[3], 7, 7]))).map_err(err)?;
        ensure(l.shape() == [1, 1, 224, 224], format!("{widths:?}: local decoder gives {:?}", l.shape()))?;
        ensure(g.shape() == [1, 1, 56, 56], format!("{widths:?}: global decoder gives {:?}", g.shape()))?;

        let clip = Tensor::<f32>::uniform(&[1, 2, 3, 224, 224], 0.0, 1.0, &mut rng(3));
        let (logits, masks) = forward_with_msd(&params, &cfg, &clip).map_err(err)?;
        ensure(logits.shape() == [1, cfg.num_classes], format!("logits {:?}", logits.shape()))?;
        ensure(masks.local.shape() == [2, 1, 224, 224], format!("local mask {:?}", masks.local.shape()))?;
        ensure(masks.global.shape() == [2, 1, 56, 56], format!("global mask {:?}", masks.global.shape()))?;
    }
    Ok("224 -> 56/28/14/7, local 56 -> 224 in 2 layers, global 7 -> 56 in 3 layers, widths 8.. and 16..".into())
}

/// Every tensor redrawn, so zero-initialized layers do not hide a dependency.
fn random_params(cfg: &ModelConfig, seed: u64) -> Parameters<f32> {
    let mut params = Parameters::<f32>::from_specs(&cfg.param_specs(), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for e in params.entries_mut() {
        e.value = Tensor::uniform(e.value.shape(), -0.3, 0.3, &mut r);
    }
    params
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn tiny_run(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(TINY).unwrap();
    cfg.seed = seed;
    cfg.data_dir = root.join("data");
    cfg.out_dir = root.join("run");
    cfg
}

const TINY: &str = "
model.t = 2
model.classes = 2
model.stem_width = 8
model.widths = 8,16,32,64
model.input = 32
model.reduce_ratio = 8
train.epochs = 3
train.batch = 4
gen.train = 8
gen.val = 4
gen.classes = 2
gen.length = 8
gen.height = 36
gen.width = 48
eval.clips = 2
";

fn detachable() -> Result<String, String> {
    let cfg = ModelConfig {
        segments: 2,
        stem_width: 8,
        widths: vec![8, 16, 32, 64],
        input_size: 32,
        reduce_ratio: 4,
        ..ModelConfig::default()
    };
    let mut r = rng(4);
    for i in 0..100 {
        let params = random_params(&cfg, i);
        let clip = Tensor::<f32>::uniform(&[2, 2, 3, 32, 32], -1.0, 1.0, &mut r);
        let (with, _) = forward_with_msd(&params, &cfg, &clip).map_err(err)?;
        let without = forward_classify(&strip_msd(&params), &cfg, &clip).map_err(err)?;
        ensure(bits(&with) == bits(&without), format!("input {i}: logits differ"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tiny_run(dir.path(), 5);
    actnet::engine::commands::gen_data(&cfg, false).map_err(err)?;
    let (outcome, _) = train_run(&cfg).map_err(err)?;
    let val = actnet::engine::commands::load_split(&cfg, true).map_err(err)?;
    let p = protocol(&cfg);
    let full = evaluate(&outcome.params, &cfg.model, &val, &p).map_err(err)?;
    let stripped = evaluate(&strip_msd(&outcome.params), &cfg.model, &val, &p).map_err(err)?;
    ensure(full.to_text() == stripped.to_text(), "trained checkpoint: eval reports differ")?;
    for v in &val {
        let view = actnet::engine::eval::center_view(v, &cfg.model).map_err(err)?;
        let x = view.reshape(&[1, 2, 3, 32, 32]).map_err(err)?;
        let (with, _) = forward_with_msd(&outcome.params, &cfg.model, &x).map_err(err)?;
        let without = forward_classify(&strip_msd(&outcome.params), &cfg.model, &x).map_err(err)?;
        ensure(bits(&with) == bits(&without), "trained checkpoint: logits differ")?;
    }
    Ok("100 random inputs and a trained checkpoint, bitwise identical".into())
}

fn loss_weights() -> Result<String, String> {
    let w = LossWeights::default();
    let total = total_loss(2.0, 0.5, 1.0, &w);
    ensure(total == 2.51, format!("total {total}"))?;
    let mut r = rng(5);
    for _ in 0..200 {
        let l: [f64; 3] = [r.gen_range(0.0..5.0), r.gen_range(0.0..5.0), r.gen_range(0.0..5.0)];
        let base = [r.gen_range(0.0..3.0), r.gen_range(0.0..3.0), r.gen_range(0.0..3.0)];
        let (a, d) = (r.gen_range(-2.0..2.0), r.gen_range(0.0..3.0));
        for axis in 0..3 {
            let f = |v: f64| {
                let mut ws = base;
                ws[axis] = v;
                total_loss(l[0], l[1], l[2], &LossWeights { cls: ws[0], local: ws[1], global: ws[2] })
            };
            // f(v + a d) = f(v) + a (f(v + d) - f(v))
            let lhs = f(base[axis] + a * d);
            let rhs = f(base[axis]) + a * (f(base[axis] + d) - f(base[axis]));
            ensure((lhs - rhs).abs() < 1e-9, format!("not linear in weight {axis}: {lhs} vs {rhs}"))?;
        }
    }
    Ok("2.51 exactly, linear in each weight".into())
}

fn excitation() -> Result<String, String> {
    let mut r = rng(6);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for i in 0..1000 {
        let reduce = [1, 2, 4][r.gen_range(0..3)];
        let channels = reduce * r.gen_range(1..5) * 4;
        let (n, t) = (r.gen_range(1..3), r.gen_range(1..6));
        let (h, w) = (r.gen_range(1..8), r.gen_range(1..8));
        let cfg = ActionConfig { reduce_ratio: reduce, ..ActionConfig::new(channels, t) };
        let params = Parameters::<f32>::from_specs(&cfg.param_specs("block"), i).map_err(err)?;
        let x = Tensor::<f32>::uniform(&[n, t, channels, h, w], -2.0, 2.0, &mut r);
        let tape = Tape::new();
        let b = params.bind(&tape, false);
        let shifted = temporal_shift(&tape.constant(x), cfg.shift_fraction).map_err(err)?;
        let maps = excitation_maps(&shifted, &b.scope("block")).map_err(err)?;
        for m in [maps.ste, maps.ce, maps.me] {
            let (a, z) = m.value().min_max();
            lo = lo.min(a);
            hi = hi.max(z);
        }
    }
    ensure(lo > 0.0 && hi < 1.0, format!("maps reach [{lo}, {hi}]"))?;

    let (n, t, c, h, w) = (2, 5, 3, 4, 4);
    let frame = Tensor::<f64>::uniform(&[n, 1, c, h, w], -1.0, 1.0, &mut r);
    let clip = Tensor::from_fn(&[n, t, c, h, w], |i| {
        let plane = c * h * w;
        frame.data()[(i / (t * plane)) * plane + i % plane]
    });
    let mut identity = vec![0.0; c * c * 9];
    for ch in 0..c {
        identity[(ch * c + ch) * 9 + 4] = 1.0;
    }
    let tape = Tape::new();
    let x = tape.constant(clip.clone());
    let id = tape.constant(Tensor::new(&[c, c, 3, 3], identity).map_err(err)?);
    let d = motion_diff(&x, &id, None).map_err(err)?.value();
    ensure(d.data().iter().all(|&v| v == 0.0), "static clip with identity kernel gives non-zero motion")?;
    let k = tape.constant(Tensor::uniform(&[c, c, 3, 3], -1.0, 1.0, &mut r));
    let d = motion_diff(&x, &k, None).map_err(err)?.value();
    let plane = c * h * w;
    let last_zero = (0..n).all(|s| d.data()[(s * t + t - 1) * plane..][..plane].iter().all(|&v| v == 0.0));
    ensure(last_zero, "last frame of the motion feature is not zero")?;
    Ok(format!("1000 forwards, min {lo:.3e}, 1 - max {:.3e}, static motion zero", 1.0 - hi))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/multitask.cfg")
}

/// Seed of the generated data; model seeds vary over 0..5.
const DATA_SEED: u64 = 1;

/// Mean predicted local mask on foreground and background pixels of the
/// validation set.
fn mask_contrast(cfg: &RunConfig, params: &Parameters<f32>, val: &[VideoClip]) -> Result<(f64, f64), String> {
    let (mut fg, mut bg) = ((0.0, 0usize), (0.0, 0usize));
    for chunk in val.chunks(4) {
        let clips: Vec<&VideoClip> = chunk.iter().collect();
        let batch = make_batch(&clips, cfg, &mut rng(7)).map_err(err)?;
        let (_, masks) = forward_with_msd(params, &cfg.model, &batch.clip).map_err(err)?;
        for (&m, &d) in masks.local.data().iter().zip(batch.local.data()) {
            let acc = if d > 0.0 { &mut fg } else { &mut bg };
            acc.0 += m as f64;
            acc.1 += 1;
        }
    }
    Ok((fg.0 / fg.1 as f64, bg.0 / bg.1 as f64))
}

fn multitask() -> Result<String, String> {
    let t0 = Instant::now();
    let base = RunConfig::from_file(&config_path()).map_err(err)?;
    let data = RunConfig { seed: DATA_SEED, ..base.clone() };
    let train_set = gen_synthetic(&synth_config(&data, false)).map_err(err)?;
    let val_set = gen_synthetic(&synth_config(&data, true)).map_err(err)?;
    let (mut acc, mut fit) = ([Vec::new(), Vec::new()], [Vec::new(), Vec::new()]);
    let mut contrast = Vec::new();
    for seed in 0..5 {
        for (m, msd) in [false, true].into_iter().enumerate() {
            let mut cfg = RunConfig { seed, ..base.clone() };
            cfg.model.msd_enabled = msd;
            let out = train(&cfg, &train_set, &val_set, &mut std::io::sink(), &mut std::io::sink()).map_err(err)?;
            fit[m].push(quick_accuracy(&out.params, &cfg.model, &train_set).map_err(err)?);
            acc[m].push(evaluate(&out.params, &cfg.model, &val_set, &protocol(&cfg)).map_err(err)?.accuracy());
            if msd {
                contrast.push(mask_contrast(&cfg, &out.params, &val_set)?);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let (b, m) = (median(acc[0].clone()), median(acc[1].clone()));
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(",");
    let fg_above = contrast.iter().filter(|(f, g)| f > g).count();
    let detail = format!(
        "val baseline [{}] median {b:.3}, msd [{}] median {m:.3}; train baseline [{}], msd [{}]; \
         local mask fg>bg in {fg_above}/5 runs; {secs:.0}s",
        fmt(&acc[0]),
        fmt(&acc[1]),
        fmt(&fit[0]),
        fmt(&fit[1])
    );
    ensure(m >= b + 0.05, format!("margin below 5 points: {detail}"))?;
    ensure(fit.iter().flatten().all(|&a| a == 1.0), format!("train accuracy below 100%: {detail}"))?;
    ensure(secs < 1800.0, format!("over 30 min: {detail}"))?;
    Ok(detail)
}

fn binarization() -> Result<String, String> {
    let raw = binarize_raw(&[11, 10, 0, 255, 9], 10);
    ensure(raw == [255, 0, 0, 255, 0], format!("raw {raw:?}"))?;
    let all: Vec<u8> = (0..=255).collect();
    for t in [0u8, 10, 128, 254, 255] {
        let once = binarize_raw(&all, t);
        ensure(binarize_raw(&once, t) == once, format!("raw threshold {t} not idempotent"))?;
    }
    let norm = Tensor::new(&[256], all.iter().map(|&p| p as f32 / 255.0).collect()).map_err(err)?;
    let b = binarize_depth(&norm, 10);
    ensure(b.data()[11] == 1.0 && b.data()[10] == 0.0, "normalized 11/255 and 10/255 misclassified")?;
    ensure(binarize_depth(&b, 10) == b, "normalized binarization not idempotent")?;
    Ok("11 -> 255, 10 -> 0, idempotent".into())
}

fn sampler() -> Result<String, String> {
    let mut r = rng(9);
    let cfg = SamplerConfig::uniform(8);
    let mut hits = [[0usize; 2]; 8];
    for _ in 0..10_000 {
        let idx = sample_segments(16, &cfg, &mut r).map_err(err)?;
        ensure(idx.len() == 8, format!("{} indices", idx.len()))?;
        for (k, &i) in idx.iter().enumerate() {
            ensure(i == 2 * k || i == 2 * k + 1, format!("segment {k} drew {i}"))?;
            hits[k][i - 2 * k] += 1;
        }
    }
    ensure(hits.iter().flatten().all(|&h| h > 0), "some frame never drawn")?;
    Ok("10000 draws, idx_k in {2k, 2k+1}, both frames used".into())
}

fn actnet(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_actnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("tiny.cfg");
    std::fs::write(&config, format!("seed = 11\n{TINY}")).map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let (c, d) = (config.to_str().unwrap(), data.to_str().unwrap());
    actnet(&["--config", c, "--data-dir", d, "gen-data"])?;
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for run in &runs {
        actnet(&["--config", c, "--data-dir", d, "--out-dir", run.to_str().unwrap(), "--set", "train.val_every=1", "train"])?;
    }
    let names = ["metrics.tsv", "epochs.tsv", "final.ckpt", "best.ckpt"];
    for name in names {
        let a = std::fs::read(runs[0].join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(runs[1].join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(a == b, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} byte-identical across two runs", names.join(", ")))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("gradient checks", gradients),
        ("conv2d / conv_transpose2d adjoint", adjoint),
        ("stage and decoder shapes", shapes),
        ("decoder removal leaves logits and eval unchanged", detachable),
        ("total loss weights", loss_weights),
        ("excitation range and static motion", excitation),
        ("multi-task benefit on synthetic clips", multitask),
        ("depth binarization", binarization),
        ("uniform segment sampler", sampler),
        ("deterministic training", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS [{n:2}] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{n:2}] {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
