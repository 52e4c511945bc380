//! Training-level properties of the detachable decoder.

use actnet::data::synth::{gen_synthetic, SynthConfig};
use actnet::engine::config::RunConfig;
use actnet::engine::train::train;
use actnet::network::{build_model, forward_with_msd, strip_msd};
use actnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "seed = 2
         model.t = 2
         model.classes = 2
         model.stem_width = 8
         model.widths = 8,16,32,64
         model.input = 32
         model.reduce_ratio = 8
         train.epochs = 3
         train.batch = 4
         train.val_every = 0
         optim.clip_norm = 1",
    )
    .unwrap();
    cfg
}

#[test]
fn zero_aux_weights_match_a_run_without_decoders() {
    let clips = gen_synthetic(&SynthConfig::new(8, 2, 8, 36, 48, 4)).unwrap();
    let mut with = tiny();
    with.model.loss.local = 0.0;
    with.model.loss.global = 0.0;
    let mut without = tiny();
    without.model.msd_enabled = false;
    let sink = || std::io::sink();
    let a = train(&with, &clips, &[], &mut sink(), &mut sink()).unwrap();
    let b = train(&without, &clips, &[], &mut sink(), &mut sink()).unwrap();
    let stripped = strip_msd(&a.params);
    assert_eq!(stripped.len(), b.params.len());
    for (x, y) in stripped.entries().iter().zip(b.params.entries()) {
        assert_eq!(x.name, y.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.value), bits(&y.value), "{} diverged", x.name);
    }
    for (x, y) in a.epochs.iter().zip(&b.epochs) {
        assert_eq!(x.cls.to_bits(), y.cls.to_bits());
    }
}

#[test]
fn untrained_masks_are_uniform() {
    let cfg = tiny();
    let params = build_model(&cfg.model, 9).unwrap();
    let clip = Tensor::<f32>::uniform(&[2, 2, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let (_, masks) = forward_with_msd(&params, &cfg.model, &clip).unwrap();
    for m in [masks.local, masks.global] {
        let (lo, hi) = m.min_max();
        assert!(hi - lo < 1e-6, "mask spread {lo}..{hi}");
    }
}
